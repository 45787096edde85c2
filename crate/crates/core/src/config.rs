//! Flat `key = value` configuration covering every tunable.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::refine::Variant;
use crate::simulator::ScenarioConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    /// Drives every random choice: scene generation and RANSAC sampling.
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub pipeline: PipelineConfig,
}

trait Value: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> Option<Self>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                format!("{self:?}")
            }
            fn read(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}
plain_value!(f64, usize, u64, bool);

impl Value for Variant {
    fn show(&self) -> String {
        self.to_string()
    }
    fn read(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Config {
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.show()),)*
                    _ => None,
                }
            }

            /// Sets one key from its text form; the error says what is wrong.
            pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::read(value).ok_or_else(|| format!("bad value `{value}` for `{key}`"))?;
                    })*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }
        }
    };
}

keys! {
    "seed" => seed;
    "n_frames" => scenario.n_frames;
    "n_sessions" => scenario.n_sessions;
    "scene_extent" => scenario.scene_extent;
    "points_per_frame" => scenario.points_per_frame;
    "tracks_per_pair" => scenario.tracks_per_pair;
    "pixel_noise" => scenario.pixel_noise;
    "outlier_rate_2d3d" => scenario.outlier_rate_2d3d;
    "outlier_rate_2d2d" => scenario.outlier_rate_2d2d;
    "gross_outlier_rate" => scenario.gross_outlier_rate;
    "gross_outlier_magnitude" => scenario.gross_outlier_magnitude;
    "session_failure_rate" => scenario.session_failure_rate;
    "drift_translation" => scenario.drift_translation;
    "drift_rotation" => scenario.drift_rotation;
    "speed" => scenario.speed;
    "slow_segments" => scenario.slow_segments;
    "frame_dt" => scenario.frame_dt;
    "max_depth" => scenario.max_depth;
    "incompatible_bias" => scenario.incompatible_bias;
    "incompatible_boost" => scenario.incompatible_boost;
    "contamination_rate" => scenario.contamination_rate;
    "contamination_offset" => scenario.contamination_offset;
    "contamination_ratio" => scenario.contamination_ratio;
    "camera_fx" => scenario.intrinsics.fx;
    "camera_fy" => scenario.intrinsics.fy;
    "camera_cx" => scenario.intrinsics.cx;
    "camera_cy" => scenario.intrinsics.cy;
    "camera_width" => scenario.intrinsics.width;
    "camera_height" => scenario.intrinsics.height;
    "map_epipolar_threshold" => scenario.map.epipolar_threshold;
    "map_reprojection_threshold_px" => scenario.map.reprojection_threshold_px;
    "map_min_angle_deg" => scenario.map.min_angle_deg;
    "ransac_threshold_px" => pipeline.localize.ransac.threshold_px;
    "ransac_max_iters" => pipeline.localize.ransac.max_iters;
    "ransac_confidence" => pipeline.localize.ransac.confidence;
    "min_inliers" => pipeline.localize.min_inliers;
    "dedupe_radius_px" => pipeline.localize.dedupe_radius_px;
    "sampson_threshold" => pipeline.sampson_threshold;
    "track_gate" => pipeline.track_gate;
    "skip_stride" => pipeline.skip_stride;
    "variant" => pipeline.refine.variant;
    "lambda1" => pipeline.refine.lambda1;
    "lambda2" => pipeline.refine.lambda2;
    "u" => pipeline.refine.u;
    "rotation_weight" => pipeline.refine.rotation_weight;
    "huber_px" => pipeline.refine.huber_px;
    "sampson_huber_sq" => pipeline.refine.sampson_huber_sq;
    "weight_tolerance" => pipeline.refine.weight_tolerance;
    "max_em_iters" => pipeline.refine.max_em_iters;
    "max_lm_iters" => pipeline.refine.max_lm_iters;
    "min_seed_matches" => pipeline.refine.min_seed_matches;
    "prune_threshold_px" => pipeline.prune_threshold_px;
    "polish" => pipeline.polish;
}

impl Config {
    /// Scenario settings with the shared seed applied.
    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed,
            ..self.scenario.clone()
        }
    }

    /// Pipeline settings with the shared seed applied.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline;
        p.localize.seed = self.seed;
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pipeline.refine.validate()?;
        let p = &self.pipeline;
        let r = &p.localize.ransac;
        if !(r.threshold_px > 0.0 && r.max_iters > 0 && r.confidence > 0.0 && r.confidence < 1.0) {
            return Err(Error::InvalidConfig("ransac needs a positive threshold, iterations and a confidence in (0, 1)".into()));
        }
        if !(p.sampson_threshold > 0.0 && p.track_gate > 0.0 && p.prune_threshold_px >= 0.0) {
            return Err(Error::InvalidConfig("sampson_threshold and track_gate must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k).unwrap()).unwrap();
        }
        out
    }

    /// Starts from the defaults; later lines win.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &crate::io::read_text(path)?)
    }
}
