//! Per-frame, per-session pose estimation from 2D-3D matches.
//!
//! Each session's matches arrive grouped by the map source that produced
//! them. Every source is filtered by its own RANSAC-PnP first, the surviving
//! inliers are merged and deduplicated, and a final RANSAC-PnP over the
//! merged set produces the session's candidate pose.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::geometry::{project, reprojection_error, CameraIntrinsics, Point2, Point3, Pose};
use crate::pnp::{p3p, refine_pose};

/// Map source a 2D-3D match was retrieved from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Sfm,
    Slam,
    Dense,
    Disparity,
    Sim,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::Sfm,
        Source::Slam,
        Source::Dense,
        Source::Disparity,
        Source::Sim,
    ];

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Source::Sfm => "SFM",
            Source::Slam => "SLAM",
            Source::Dense => "DENSE",
            Source::Disparity => "DISPARITY",
            Source::Sim => "SIM",
        };
        f.write_str(s)
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "SFM" => Ok(Source::Sfm),
            "SLAM" => Ok(Source::Slam),
            "DENSE" => Ok(Source::Dense),
            "DISPARITY" => Ok(Source::Disparity),
            "SIM" => Ok(Source::Sim),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

/// A query pixel matched to a map point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match2D3D {
    pub query: Point2,
    pub world: Point3,
    pub source: Source,
    pub session: u32,
}

/// One session's pose estimate for a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub session: u32,
    pub pose: Pose,
    pub inliers: Vec<Match2D3D>,
}

impl Candidate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }
}

/// All candidates for one frame, at most one per session, sorted by session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub frame: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(frame: usize, mut candidates: Vec<Candidate>) -> Self {
        candidates.sort_by_key(|c| c.session);
        candidates.dedup_by_key(|c| c.session);
        Self { frame, candidates }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 1000,
            confidence: 0.999,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeConfig {
    pub ransac: RansacParams,
    /// A session yields no candidate below this many final inliers.
    pub min_inliers: usize,
    /// Query pixels closer than this are the same feature.
    pub dedupe_radius_px: f64,
    pub seed: u64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            min_inliers: 10,
            dedupe_radius_px: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Vec<Match2D3D>,
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn inlier_indices(pose: &Pose, matches: &[Match2D3D], k: &CameraIntrinsics, thr: f64) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, m)| matches!(reprojection_error(pose, k, &m.world, &m.query), Some(e) if e <= thr))
        .map(|(i, _)| i)
        .collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64, sample_size: i32) -> f64 {
    let p = inlier_ratio.powi(sample_size);
    if p >= 1.0 {
        return 1.0;
    }
    if p <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil()
}

/// RANSAC over three-point resection hypotheses checked against a fourth
/// point, followed by least-squares refinement on the consensus set.
pub fn ransac_pnp(
    matches: &[Match2D3D],
    k: &CameraIntrinsics,
    params: &RansacParams,
    seed: u64,
) -> Result<PnpResult> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::TooFewMatches { got: n });
    }
    let thr = params.threshold_px;
    let mut rng = Pcg64::seed_from_u64(seed);
    let bearings: Vec<_> = matches.iter().map(|m| k.bearing(&m.query)).collect();

    let mut best: Option<(Pose, usize)> = None;
    let mut budget = params.max_iters as f64;
    let mut iter = 0usize;
    while (iter as f64) < budget && iter < params.max_iters {
        iter += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let rays = [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]];
        let pts = [matches[idx[0]].world, matches[idx[1]].world, matches[idx[2]].world];
        let check = &matches[idx[3]];
        let hypothesis = p3p(&rays, &pts)
            .into_iter()
            .filter_map(|pose| reprojection_error(&pose, k, &check.world, &check.query).map(|e| (pose, e)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((pose, err)) = hypothesis else { continue };
        if err > thr {
            continue;
        }
        let count = inlier_indices(&pose, matches, k, thr).len();
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((pose, count));
            let need = required_iterations(count as f64 / n as f64, params.confidence, 4);
            budget = budget.min(need);
        }
    }

    let Some((mut pose, count)) = best else {
        return Err(Error::NoConsensus { best: 0 });
    };
    if count < 4 {
        return Err(Error::NoConsensus { best: count });
    }
    let mut inliers = inlier_indices(&pose, matches, k, thr);
    for _ in 0..3 {
        let obs: Vec<_> = inliers.iter().map(|&i| (matches[i].query, matches[i].world)).collect();
        pose = refine_pose(&pose, &obs, k, 50);
        let next = inlier_indices(&pose, matches, k, thr);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    if inliers.len() < 4 {
        return Err(Error::NoConsensus { best: inliers.len() });
    }
    Ok(PnpResult {
        pose,
        inliers: inliers.into_iter().map(|i| matches[i]).collect(),
    })
}

/// Keeps one match per query feature: the one with the smallest
/// reprojection error under `pose_hint`. Group order is first appearance.
pub fn dedupe_matches(
    matches: &[Match2D3D],
    pose_hint: &Pose,
    k: &CameraIntrinsics,
    radius_px: f64,
) -> Vec<Match2D3D> {
    let err = |m: &Match2D3D| reprojection_error(pose_hint, k, &m.world, &m.query).unwrap_or(f64::INFINITY);
    let mut kept: Vec<(Match2D3D, f64)> = Vec::with_capacity(matches.len());
    let r2 = radius_px * radius_px;
    for m in matches {
        let e = err(m);
        match kept.iter_mut().find(|(s, _)| (s.query - m.query).norm_squared() <= r2) {
            Some(slot) => {
                if e < slot.1 {
                    *slot = (*m, e);
                }
            }
            None => kept.push((*m, e)),
        }
    }
    kept.into_iter().map(|(m, _)| m).collect()
}

/// Per-group RANSAC prefilter, merge, dedupe and a final RANSAC.
fn fuse_groups(
    groups: &[(u64, &[Match2D3D])],
    k: &CameraIntrinsics,
    cfg: &LocalizeConfig,
    stream: &[u64],
) -> Option<PnpResult> {
    let mut filtered: Vec<(u64, PnpResult)> = Vec::new();
    for (tag, ms) in groups {
        let mut tags = stream.to_vec();
        tags.push(*tag);
        if let Ok(res) = ransac_pnp(ms, k, &cfg.ransac, mix_seed(cfg.seed, &tags)) {
            filtered.push((*tag, res));
        }
    }
    if filtered.is_empty() {
        return None;
    }
    let hint = filtered
        .iter()
        .max_by(|a, b| a.1.inliers.len().cmp(&b.1.inliers.len()).then(b.0.cmp(&a.0)))
        .map(|(_, r)| r.pose)?;
    let merged: Vec<Match2D3D> = filtered.iter().flat_map(|(_, r)| r.inliers.iter().copied()).collect();
    let deduped = dedupe_matches(&merged, &hint, k, cfg.dedupe_radius_px);

    let result = if filtered.len() == 1 && deduped.len() == merged.len() {
        filtered.pop().map(|(_, r)| r)?
    } else {
        let mut tags = stream.to_vec();
        tags.push(u64::MAX);
        ransac_pnp(&deduped, k, &cfg.ransac, mix_seed(cfg.seed, &tags)).ok()?
    };
    (result.inliers.len() >= cfg.min_inliers.max(4)).then_some(result)
}

/// Candidate pose for one session from its source-grouped matches.
pub fn localize_session(
    frame: usize,
    session: u32,
    by_source: &BTreeMap<Source, Vec<Match2D3D>>,
    k: &CameraIntrinsics,
    cfg: &LocalizeConfig,
) -> Option<Candidate> {
    let groups: Vec<(u64, &[Match2D3D])> = by_source
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(s, v)| (s.index(), v.as_slice()))
        .collect();
    let res = fuse_groups(&groups, k, cfg, &[frame as u64, session as u64])?;
    Some(Candidate {
        session,
        pose: res.pose,
        inliers: res.inliers,
    })
}

fn group_matches(matches: &[Match2D3D]) -> BTreeMap<u32, BTreeMap<Source, Vec<Match2D3D>>> {
    let mut out: BTreeMap<u32, BTreeMap<Source, Vec<Match2D3D>>> = BTreeMap::new();
    for m in matches {
        out.entry(m.session).or_default().entry(m.source).or_default().push(*m);
    }
    out
}

/// Localizes a frame against every session present in `matches`.
pub fn localize_frame(
    frame: usize,
    matches: &[Match2D3D],
    k: &CameraIntrinsics,
    cfg: &LocalizeConfig,
) -> CandidateSet {
    let candidates = group_matches(matches)
        .iter()
        .filter_map(|(&session, by_source)| localize_session(frame, session, by_source, k, cfg))
        .collect();
    CandidateSet::new(frame, candidates)
}

/// Single pose from all sessions' matches pooled together, the naive
/// alternative to per-session candidates plus consensus.
pub fn localize_merged(
    frame: usize,
    matches: &[Match2D3D],
    k: &CameraIntrinsics,
    cfg: &LocalizeConfig,
) -> Option<PnpResult> {
    let grouped = group_matches(matches);
    let groups: Vec<(u64, &[Match2D3D])> = grouped
        .iter()
        .flat_map(|(&session, by_source)| {
            by_source
                .iter()
                .map(move |(s, v)| ((session as u64) << 8 | s.index(), v.as_slice()))
        })
        .filter(|(_, v)| !v.is_empty())
        .collect();
    fuse_groups(&groups, k, cfg, &[frame as u64, u64::MAX - 1])
}

/// Total squared reprojection error of a match set; behind-camera points count as `None`.
pub fn total_reprojection_error(pose: &Pose, matches: &[Match2D3D], k: &CameraIntrinsics) -> Option<f64> {
    matches
        .iter()
        .map(|m| project(pose, k, &m.world).ok().map(|p| (p - m.query).norm_squared()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, pose_distance};
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    /// Scene of `n` points 4-14 m in front of `truth`; `outliers` of them get a
    /// random wrong world point.
    fn scene(
        truth: &Pose,
        n: usize,
        outlier_frac: f64,
        noise_px: f64,
        seed: u64,
        source: Source,
    ) -> (Vec<Match2D3D>, Vec<bool>) {
        let k = camera();
        let mut rng = Pcg64::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
        let n_out = (n as f64 * outlier_frac).round() as usize;
        let mut out = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let px = Point2::new(rng.random_range(10.0..630.0), rng.random_range(10.0..470.0));
            let depth = rng.random_range(4.0..14.0);
            let world = crate::geometry::unproject(truth, &k, &px, depth);
            let mut query = project(truth, &k, &world).unwrap();
            if noise_px > 0.0 {
                query += Point2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let outlier = i < n_out;
            let world = if outlier {
                let wrong = Point2::new(rng.random_range(10.0..630.0), rng.random_range(10.0..470.0));
                crate::geometry::unproject(truth, &k, &wrong, rng.random_range(4.0..14.0))
            } else {
                world
            };
            out.push(Match2D3D { query, world, source, session: 0 });
            labels.push(outlier);
        }
        (out, labels)
    }

    fn truth_pose() -> Pose {
        Pose::new(exp_so3(&Vector3::new(0.05, -0.2, 0.02)), Vector3::new(3.0, 0.5, -2.0))
    }

    #[test]
    fn ransac_noiseless_exact() {
        let truth = truth_pose();
        let (ms, _) = scene(&truth, 100, 0.0, 0.0, 1, Source::Sim);
        let res = ransac_pnp(&ms, &camera(), &RansacParams::default(), 7).unwrap();
        let (r, t) = pose_distance(&res.pose, &truth);
        assert!(r < 1e-6 && t < 1e-6, "{r} {t}");
        assert_eq!(res.inliers.len(), 100);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let truth = truth_pose();
        let (ms, labels) = scene(&truth, 100, 0.3, 1.0, 2, Source::Sim);
        let res = ransac_pnp(&ms, &camera(), &RansacParams::default(), 3).unwrap();
        let (_, t) = pose_distance(&res.pose, &truth);
        assert!(t < 0.05, "translation error {t}");
        for (m, &out) in ms.iter().zip(&labels) {
            if out {
                assert!(!res.inliers.contains(m));
            }
        }
    }

    #[test]
    fn ransac_too_few() {
        let (ms, _) = scene(&truth_pose(), 3, 0.0, 0.0, 1, Source::Sim);
        assert!(matches!(
            ransac_pnp(&ms, &camera(), &RansacParams::default(), 0),
            Err(Error::TooFewMatches { got: 3 })
        ));
    }

    #[test]
    fn ransac_is_deterministic() {
        let (ms, _) = scene(&truth_pose(), 80, 0.4, 1.0, 5, Source::Sim);
        let a = ransac_pnp(&ms, &camera(), &RansacParams::default(), 11).unwrap();
        let b = ransac_pnp(&ms, &camera(), &RansacParams::default(), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dedupe_keeps_minimal_error() {
        let k = camera();
        let pose = truth_pose();
        let world = crate::geometry::unproject(&pose, &k, &Point2::new(300.0, 200.0), 8.0);
        let query = project(&pose, &k, &world).unwrap();
        // a second world point that reprojects 2 px away, and a third at 0.3 px
        let off = |d: f64| crate::geometry::unproject(&pose, &k, &(query + Point2::new(d, 0.0)), 8.0);
        let mk = |w: Point3, s: Source| Match2D3D { query, world: w, source: s, session: 0 };
        let group = vec![mk(off(2.0), Source::Sfm), mk(off(0.3), Source::Slam), mk(off(1.1), Source::Dense)];
        let out = dedupe_matches(&group, &pose, &k, 0.5);
        assert_eq!(out.len(), 1);
        // brute-force argmin oracle
        let best = group
            .iter()
            .min_by(|a, b| {
                reprojection_error(&pose, &k, &a.world, &a.query)
                    .unwrap()
                    .total_cmp(&reprojection_error(&pose, &k, &b.world, &b.query).unwrap())
            })
            .unwrap();
        assert_eq!(out[0], *best);
        assert_eq!(out[0].source, Source::Slam);

        let two = vec![mk(off(0.3), Source::Sfm), mk(off(2.0), Source::Slam)];
        let out = dedupe_matches(&two, &pose, &k, 0.5);
        assert_eq!(out, vec![two[0]]);
    }

    #[test]
    fn dedupe_without_duplicates_is_identity_and_idempotent() {
        let (ms, _) = scene(&truth_pose(), 50, 0.2, 0.5, 9, Source::Sfm);
        let once = dedupe_matches(&ms, &truth_pose(), &camera(), 0.5);
        assert_eq!(once, ms);
        let twice = dedupe_matches(&once, &truth_pose(), &camera(), 0.5);
        assert_eq!(once, twice);
    }

    #[test]
    fn single_source_reduces_to_ransac() {
        let truth = truth_pose();
        let (ms, _) = scene(&truth, 60, 0.2, 0.5, 4, Source::Sfm);
        let cfg = LocalizeConfig { seed: 99, ..Default::default() };
        let set = localize_frame(3, &ms, &camera(), &cfg);
        assert_eq!(set.len(), 1);
        let direct = ransac_pnp(&ms, &camera(), &cfg.ransac, mix_seed(99, &[3, 0, Source::Sfm.index()])).unwrap();
        assert_eq!(set.candidates[0].pose, direct.pose);
        assert_eq!(set.candidates[0].inliers, direct.inliers);
    }

    #[test]
    fn prefilter_rescues_low_inlier_source() {
        // source A: 20% inliers; source B: 90% inliers. Pooling the raw
        // matches dilutes the ratio; per-source filtering does not.
        let truth = truth_pose();
        let k = camera();
        let (mut a, _) = scene(&truth, 150, 0.8, 0.5, 21, Source::Sfm);
        let (b, _) = scene(&truth, 40, 0.1, 0.5, 22, Source::Slam);
        a.iter_mut().for_each(|m| m.source = Source::Sfm);
        let cfg = LocalizeConfig {
            ransac: RansacParams { max_iters: 60, ..Default::default() },
            seed: 5,
            ..Default::default()
        };
        let mut by_source = BTreeMap::new();
        by_source.insert(Source::Sfm, a.clone());
        by_source.insert(Source::Slam, b.clone());
        let cand = localize_session(0, 0, &by_source, &k, &cfg).expect("candidate");
        let (_, t) = pose_distance(&cand.pose, &truth);
        assert!(t < 0.05, "{t}");

        let pooled: Vec<_> = a.iter().chain(b.iter()).copied().collect();
        let naive_failures = (0..20)
            .filter(|s| match ransac_pnp(&pooled, &k, &cfg.ransac, *s) {
                Ok(r) => pose_distance(&r.pose, &truth).1 > 0.05 || r.inliers.len() < cfg.min_inliers,
                Err(_) => true,
            })
            .count();
        assert!(naive_failures > 0, "naive pooling never failed at this budget");
    }

    #[test]
    fn all_outlier_session_has_no_candidate() {
        let (ms, _) = scene(&truth_pose(), 60, 1.0, 0.5, 8, Source::Sfm);
        let set = localize_frame(0, &ms, &camera(), &LocalizeConfig::default());
        assert!(set.is_empty());
    }
}
