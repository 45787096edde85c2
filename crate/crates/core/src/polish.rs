//! One optional extra round: prune every session's 2D-3D matches against
//! the refined poses, relocalize per session, then fuse and refine again.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::consensus::Fusion;
use crate::error::Result;
use crate::geometry::{reprojection_error, CameraIntrinsics, Pose};
use crate::localize::{dedupe_matches, mix_seed, ransac_pnp, Candidate, CandidateSet, LocalizeConfig, Match2D3D};
use crate::pipeline::{build_problem, fuse_all, Inputs, PipelineConfig};
use crate::refine::{refine_from, RefineOutput};

/// Consensus/refinement executions including the first pass.
pub const MAX_ROUNDS: usize = 2;

/// Matches whose reprojection error under `x` is at most `threshold_px`.
pub fn guided_prune(x: &Pose, matches: &[Match2D3D], k: &CameraIntrinsics, threshold_px: f64) -> Vec<Match2D3D> {
    matches
        .iter()
        .filter(|m| matches!(reprojection_error(x, k, &m.world, &m.query), Some(e) if e <= threshold_px))
        .copied()
        .collect()
}

fn relocalize(frame: usize, x: &Pose, matches: &[Match2D3D], k: &CameraIntrinsics, cfg: &LocalizeConfig) -> CandidateSet {
    let mut by_session: BTreeMap<u32, Vec<Match2D3D>> = BTreeMap::new();
    for m in matches {
        by_session.entry(m.session).or_default().push(*m);
    }
    let candidates = by_session
        .into_iter()
        .filter_map(|(session, ms)| {
            let ms = dedupe_matches(&ms, x, k, cfg.dedupe_radius_px);
            let seed = mix_seed(cfg.seed, &[frame as u64, session as u64, 0x5057]);
            let res = ransac_pnp(&ms, k, &cfg.ransac, seed).ok()?;
            (res.inliers.len() >= cfg.min_inliers.max(4)).then_some(Candidate {
                session,
                pose: res.pose,
                inliers: res.inliers,
            })
        })
        .collect();
    CandidateSet::new(frame, candidates)
}

#[derive(Clone, Debug)]
pub struct PolishOutput {
    pub candidates: Vec<CandidateSet>,
    pub fusion: Fusion,
    pub refined: RefineOutput,
    pub rounds: usize,
}

/// `refined` holds one pose per entry of `inputs.frames`.
pub fn polish(inputs: &Inputs, refined: &[Pose], cfg: &PipelineConfig) -> Result<PolishOutput> {
    let candidates: Vec<CandidateSet> = inputs
        .frames
        .par_iter()
        .zip(refined.par_iter())
        .map(|((f, _), x)| {
            let kept = guided_prune(x, inputs.frame_matches(*f), &inputs.k, cfg.prune_threshold_px);
            relocalize(*f, x, &kept, &inputs.k, &cfg.localize)
        })
        .collect();
    let fusion = fuse_all(&candidates, inputs, cfg)?;
    let problem = build_problem(inputs, &fusion.chosen, cfg);
    let refined = refine_from(&problem, &cfg.refine, refined.to_vec())?;
    Ok(PolishOutput {
        candidates,
        fusion,
        refined,
        rounds: MAX_ROUNDS,
    })
}
