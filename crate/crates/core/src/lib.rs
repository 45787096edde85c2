pub mod banded;
pub mod config;
pub mod consensus;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod localize;
pub mod map_build;
pub mod pipeline;
pub mod pnp;
pub mod polish;
pub mod refine;
pub mod simulator;

pub use error::{Error, Result};
