//! Stage orchestration: localize, fuse, refine and polish.

use std::collections::BTreeMap;
#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use rayon::prelude::*;

use crate::consensus::{fuse, Fusion, TrackStore};
use crate::error::Result;
use crate::evaluation::{StageTiming, Trajectory};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::map_build::prune_epipolar;
use crate::localize::{localize_frame, localize_merged, Candidate, CandidateSet, LocalizeConfig, Match2D3D};
use crate::polish::{polish, PolishOutput};
use crate::refine::{refine, Prior, RefineConfig, RefineOutput, RefinementProblem, Relative};
use crate::simulator::Scenario;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub localize: LocalizeConfig,
    /// Squared pixels.
    pub sampson_threshold: f64,
    pub refine: RefineConfig,
    /// Adds relative factors between frames `k` and `k + stride`; 0 disables.
    pub skip_stride: usize,
    /// Tracks entering a relative factor must have a Sampson error (squared
    /// pixels) at most this large under the odometry relative pose.
    pub track_gate: f64,
    pub prune_threshold_px: f64,
    pub polish: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            localize: LocalizeConfig::default(),
            sampson_threshold: 4.0,
            refine: RefineConfig::default(),
            skip_stride: 0,
            track_gate: 16.0,
            prune_threshold_px: 3.0,
            polish: true,
        }
    }
}

/// Everything the back-end consumes, independent of where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub k: CameraIntrinsics,
    /// `(frame id, timestamp)`, ascending.
    pub frames: Vec<(usize, f64)>,
    pub matches: BTreeMap<usize, Vec<Match2D3D>>,
    pub tracks: TrackStore,
    pub odometry: BTreeMap<(usize, usize), Pose>,
}

impl Inputs {
    pub fn from_scenario(sc: &Scenario) -> Self {
        Self {
            k: sc.config.intrinsics,
            frames: sc.frames.iter().map(|f| (f.frame, f.timestamp)).collect(),
            matches: sc.frames.iter().map(|f| (f.frame, f.matches.clone())).collect(),
            tracks: sc.tracks.clone(),
            odometry: sc.odometry.clone(),
        }
    }

    pub fn frame_matches(&self, frame: usize) -> &[Match2D3D] {
        self.matches.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Poses listed per frame position, as a trajectory; `None` entries are
    /// left out.
    pub fn trajectory(&self, poses: &[Option<Pose>]) -> Trajectory {
        self.frames
            .iter()
            .zip(poses)
            .filter_map(|((_, ts), p)| p.map(|p| (*ts, p)))
            .collect()
    }
}

pub fn localize_all(inputs: &Inputs, cfg: &LocalizeConfig) -> Vec<CandidateSet> {
    inputs
        .frames
        .par_iter()
        .map(|(f, _)| localize_frame(*f, inputs.frame_matches(*f), &inputs.k, cfg))
        .collect()
}

/// Pooled 2D-3D RANSAC per frame, the naive multi-session baseline.
pub fn merge_baseline(inputs: &Inputs, cfg: &LocalizeConfig) -> Vec<Option<Pose>> {
    inputs
        .frames
        .par_iter()
        .map(|(f, _)| localize_merged(*f, inputs.frame_matches(*f), &inputs.k, cfg).map(|r| r.pose))
        .collect()
}

pub fn fuse_all(candidates: &[CandidateSet], inputs: &Inputs, cfg: &PipelineConfig) -> Result<Fusion> {
    fuse(candidates, &inputs.tracks, &inputs.k, cfg.sampson_threshold)
}

/// Chosen pose per frame position.
pub fn chosen_poses(fusion: &Fusion) -> Vec<Option<Pose>> {
    fusion.chosen.iter().map(|(_, c)| c.as_ref().map(|c| c.pose)).collect()
}

fn relative_between(inputs: &Inputs, a: usize, b: usize) -> Option<Pose> {
    let mut z = Pose::identity();
    for f in a..b {
        z = z.compose(inputs.odometry.get(&(f, f + 1))?);
    }
    Some(z)
}

/// Priors from the chosen candidates, relative factors from odometry and
/// gated tracks between consecutive frames (plus skip factors when enabled).
pub fn build_problem(inputs: &Inputs, chosen: &[(usize, Option<Candidate>)], cfg: &PipelineConfig) -> RefinementProblem {
    let skip_stride = cfg.skip_stride;
    let frames: Vec<usize> = inputs.frames.iter().map(|(f, _)| *f).collect();
    let position: BTreeMap<usize, usize> = frames.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let mut priors: Vec<Option<Prior>> = vec![None; frames.len()];
    for (f, c) in chosen {
        if let (Some(&i), Some(c)) = (position.get(f), c) {
            priors[i] = Some(Prior {
                pose: c.pose,
                matches: c.inliers.iter().map(|m| (m.query, m.world)).collect(),
            });
        }
    }
    let mut relatives = Vec::new();
    let mut add = |i: usize, j: usize| {
        let (a, b) = (frames[i], frames[j]);
        if let Some(z) = relative_between(inputs, a, b) {
            let tracks = inputs
                .tracks
                .get(&(a, b))
                .map(|t| match prune_epipolar(t, &Pose::identity(), &z, &inputs.k, cfg.track_gate) {
                    Ok(kept) => kept.pairs,
                    // no usable baseline: the refinement drops the term itself
                    Err(_) => t.pairs.clone(),
                })
                .unwrap_or_default();
            relatives.push(Relative { from: i, to: j, z, tracks });
        }
    };
    for i in 1..frames.len() {
        add(i - 1, i);
    }
    if skip_stride > 1 {
        for i in skip_stride..frames.len() {
            add(i - skip_stride, i);
        }
    }
    RefinementProblem {
        frames,
        priors,
        relatives,
        k: inputs.k,
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub candidates: Vec<CandidateSet>,
    pub fusion: Fusion,
    pub problem: RefinementProblem,
    pub refined: RefineOutput,
    pub polished: Option<PolishOutput>,
    pub timings: Vec<StageTiming>,
}

impl RunOutput {
    /// Final poses: polished when a polish round ran, refined otherwise.
    pub fn final_poses(&self) -> &[Pose] {
        match &self.polished {
            Some(p) => &p.refined.state.poses,
            None => &self.refined.state.poses,
        }
    }
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, frames: usize, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push(StageTiming {
        stage: stage.into(),
        total_ms: start.elapsed().as_secs_f64() * 1e3,
        frames,
    });
    out
}

pub fn run(inputs: &Inputs, cfg: &PipelineConfig) -> Result<RunOutput> {
    let n = inputs.frames.len();
    let mut timings = Vec::new();
    let candidates = timed(&mut timings, "localize", n, || localize_all(inputs, &cfg.localize));
    let fusion = timed(&mut timings, "fuse", n, || fuse_all(&candidates, inputs, cfg))?;
    let problem = build_problem(inputs, &fusion.chosen, cfg);
    let refined = timed(&mut timings, "refine", n, || refine(&problem, &cfg.refine))?;
    let polished = if cfg.polish {
        Some(timed(&mut timings, "polish", n, || polish(inputs, &refined.state.poses, cfg))?)
    } else {
        None
    };
    Ok(RunOutput {
        candidates,
        fusion,
        problem,
        refined,
        polished,
        timings,
    })
}
