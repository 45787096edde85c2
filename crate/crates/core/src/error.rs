use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the localization back-end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("relative translation norm {norm:e} is too small for epipolar geometry")]
    DegenerateBaseline { norm: f64 },
    #[error("sampson denominator vanished")]
    DegenerateDenominator,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("triangulation angle {angle_deg:.4} deg below minimum")]
    InsufficientParallax { angle_deg: f64 },
    #[error("triangulated point has non-positive depth in at least one view")]
    CheiralityViolation,

    #[error("need at least 4 matches for PnP, got {got}")]
    TooFewMatches { got: usize },
    #[error("RANSAC found no consensus (best inlier count {best})")]
    NoConsensus { best: usize },

    #[error("candidate sequence is empty")]
    EmptySequence,
    #[error("graph exceeds oracle scale: {frames} frames, {max_candidates} candidates")]
    TooLarge { frames: usize, max_candidates: usize },

    #[error("match set is empty")]
    EmptyMatchSet,
    #[error("no frame has enough 2D-3D matches to act as a seed")]
    NoSeeds,
    #[error("odometry between frames {from} and {to} is missing")]
    MissingOdometry { from: usize, to: usize },
    #[error("least-squares solver diverged: {0}")]
    SolverDiverged(String),

    #[error("estimated and reference trajectories share no frames")]
    NoOverlap,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BehindCamera { .. } => "behind_camera",
            Error::DegenerateBaseline { .. } => "degenerate_baseline",
            Error::DegenerateDenominator => "degenerate_denominator",
            Error::InvalidIntrinsics(_) => "invalid_intrinsics",
            Error::InsufficientParallax { .. } => "insufficient_parallax",
            Error::CheiralityViolation => "cheirality_violation",
            Error::TooFewMatches { .. } => "too_few_matches",
            Error::NoConsensus { .. } => "no_consensus",
            Error::EmptySequence => "empty_sequence",
            Error::TooLarge { .. } => "too_large",
            Error::EmptyMatchSet => "empty_match_set",
            Error::NoSeeds => "no_seeds",
            Error::MissingOdometry { .. } => "missing_odometry",
            Error::SolverDiverged(_) => "solver_diverged",
            Error::NoOverlap => "no_overlap",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
