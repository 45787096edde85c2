//! Robust pose refinement by expectation maximization.
//!
//! Every frame `k` with a global prior `P_k` carries a weight `w_k`. The
//! objective is
//!
//! ```text
//! Σ_k w_k (‖P_k ⊖ X_k‖² + λ1 π_k) + Σ_(a,b) (‖h(X_a, X_b) ⊖ Z_ab‖² + λ2 ρ_ab)
//!     + U² Σ_k (w_k − ln w_k)
//! ```
//!
//! where `π_k` is the mean Huber reprojection cost of the frame's 2D-3D
//! matches and `ρ_ab` the mean Huber Sampson cost of the tracked 2D-2D
//! matches. The E-step minimizes over the weights in closed form and the
//! M-step over the poses with Levenberg-Marquardt on a banded system.

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use rayon::prelude::*;

use crate::banded::BandedMatrix;
use crate::error::{Error, Result};
use crate::geometry::{
    log_so3, project_with_jacobian, right_jacobian_inv, skew, CameraIntrinsics, Point2, Point3, Pose,
    MIN_BASELINE,
};

pub type Matrix1x6 = SMatrix<f64, 1, 6>;

/// Reprojection cost charged to a point behind the camera, in pixels.
const BEHIND_CAMERA_PX: f64 = 100.0;

/// Which residual families enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Priors and relative poses only.
    Pgo,
    /// Adds the 2D-2D Sampson terms.
    Pgo2d2d,
    /// Adds the 2D-3D reprojection terms.
    Pgo2d3d,
    /// All four terms.
    Pgba,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Pgo, Variant::Pgo2d2d, Variant::Pgo2d3d, Variant::Pgba];

    pub fn uses_2d3d(self) -> bool {
        matches!(self, Variant::Pgo2d3d | Variant::Pgba)
    }

    pub fn uses_2d2d(self) -> bool {
        matches!(self, Variant::Pgo2d2d | Variant::Pgba)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Pgo => "PGO",
            Variant::Pgo2d2d => "PGO_2D2D",
            Variant::Pgo2d3d => "PGO_2D3D",
            Variant::Pgba => "PGBA",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PGO" => Ok(Variant::Pgo),
            "PGO_2D2D" => Ok(Variant::Pgo2d2d),
            "PGO_2D3D" => Ok(Variant::Pgo2d3d),
            "PGBA" => Ok(Variant::Pgba),
            _ => Err(Error::InvalidConfig(format!("unknown refinement variant '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub u: f64,
    /// Metres per radian in the pose error.
    pub rotation_weight: f64,
    pub huber_px: f64,
    /// Huber width of the Sampson term, squared pixels.
    pub sampson_huber_sq: f64,
    pub variant: Variant,
    pub weight_tolerance: f64,
    pub max_em_iters: usize,
    pub max_lm_iters: usize,
    pub min_seed_matches: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-2,
            lambda2: 1e-2,
            u: 0.5,
            rotation_weight: 1.0,
            huber_px: 3.0,
            sampson_huber_sq: 4.0,
            variant: Variant::Pgba,
            weight_tolerance: 1e-3,
            max_em_iters: 20,
            max_lm_iters: 10,
            min_seed_matches: 30,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0 && self.u > 0.0) {
            return Err(Error::InvalidConfig("lambda1, lambda2 and u must be positive".into()));
        }
        if !(self.rotation_weight > 0.0 && self.huber_px > 0.0 && self.sampson_huber_sq > 0.0) {
            return Err(Error::InvalidConfig("rotation weight and Huber widths must be positive".into()));
        }
        if !(self.weight_tolerance > 0.0) || self.max_em_iters == 0 {
            return Err(Error::InvalidConfig("EM stopping rule needs a positive tolerance and iteration cap".into()));
        }
        Ok(())
    }
}

/// Global pose estimate of a frame and the 2D-3D matches behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub pose: Pose,
    pub matches: Vec<(Point2, Point3)>,
}

/// Relative pose measurement `Z ≈ X_from⁻¹ X_to` with tracked pixels
/// `(in from, in to)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Relative {
    pub from: usize,
    pub to: usize,
    pub z: Pose,
    pub tracks: Vec<(Point2, Point2)>,
}

/// Frames are addressed by position; `frames` keeps their external ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementProblem {
    pub frames: Vec<usize>,
    pub priors: Vec<Option<Prior>>,
    pub relatives: Vec<Relative>,
    pub k: CameraIntrinsics,
}

impl RefinementProblem {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.len() != self.frames.len() {
            return Err(Error::InvalidConfig("one prior slot per frame required".into()));
        }
        for r in &self.relatives {
            if r.from >= self.len() || r.to >= self.len() || r.from == r.to {
                return Err(Error::InvalidConfig(format!("relative factor {}->{} out of range", r.from, r.to)));
            }
        }
        Ok(())
    }

    /// Drops frame `k`'s prior together with its matches and weight.
    pub fn without_prior(&self, k: usize) -> Self {
        let mut p = self.clone();
        p.priors[k] = None;
        p
    }

    fn half_bandwidth(&self) -> usize {
        let span = self.relatives.iter().map(|r| r.from.abs_diff(r.to)).max().unwrap_or(0);
        6 * (span + 1) - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementState {
    pub poses: Vec<Pose>,
    /// `None` for frames without a prior.
    pub weights: Vec<Option<f64>>,
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Init,
    E,
    M,
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Step::Init => "init",
            Step::E => "E",
            Step::M => "M",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub step: Step,
    pub objective: f64,
    pub max_dw: f64,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub state: RefinementState,
    pub log: Vec<LogEntry>,
}

/// `ρ(s)` for a squared norm `s` with width `delta`.
pub fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

/// `dρ/ds`.
fn huber_slope(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

/// `[t_X − t_P; ρ Log(R_Pᵀ R_X)]`.
pub fn residual_pose_prior(x: &Pose, p: &Pose, rotation_weight: f64) -> Vector6<f64> {
    let dt = x.translation - p.translation;
    let dr = log_so3(&(p.rotation.inverse() * x.rotation)) * rotation_weight;
    Vector6::new(dt.x, dt.y, dt.z, dr.x, dr.y, dr.z)
}

pub fn prior_jacobian(x: &Pose, p: &Pose, rotation_weight: f64) -> Matrix6<f64> {
    let phi = log_so3(&(p.rotation.inverse() * x.rotation));
    let mut j = Matrix6::identity();
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&(right_jacobian_inv(&phi) * rotation_weight));
    j
}

/// Pose error between `X_a⁻¹ X_b` and `z`.
pub fn residual_relative(xa: &Pose, xb: &Pose, z: &Pose, rotation_weight: f64) -> Vector6<f64> {
    residual_pose_prior(&xa.inverse().compose(xb), z, rotation_weight)
}

/// Jacobians of [`residual_relative`] with respect to `X_a` and `X_b`.
pub fn relative_jacobians(xa: &Pose, xb: &Pose, z: &Pose, rotation_weight: f64) -> (Matrix6<f64>, Matrix6<f64>) {
    let h = xa.inverse().compose(xb);
    let phi = log_so3(&(z.rotation.inverse() * h.rotation));
    let jr = right_jacobian_inv(&phi) * rotation_weight;
    let rat = xa.rotation_matrix().transpose();
    let rh = h.rotation_matrix();
    let mut ja = Matrix6::zeros();
    let mut jb = Matrix6::zeros();
    ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rat));
    ja.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&h.translation));
    ja.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jr * rh.transpose()));
    jb.fixed_view_mut::<3, 3>(0, 0).copy_from(&rat);
    jb.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr);
    (ja, jb)
}

/// Pixel residual `proj(X, x) − u` and its Jacobian; `None` behind the camera.
pub fn reprojection_residual(
    x: &Pose,
    k: &CameraIntrinsics,
    obs: &(Point2, Point3),
) -> Option<(Point2, crate::geometry::Matrix2x6)> {
    project_with_jacobian(x, k, &obs.1).ok().map(|(p, j)| (p - obs.0, j))
}

fn reprojection_cost(x: &Pose, k: &CameraIntrinsics, obs: &(Point2, Point3), huber_px: f64) -> f64 {
    match reprojection_residual(x, k, obs) {
        Some((e, _)) => huber(e.norm_squared(), huber_px),
        None => huber(BEHIND_CAMERA_PX * BEHIND_CAMERA_PX, huber_px),
    }
}

/// Mean Huber reprojection cost of `matches` under `x`.
pub fn residual_reprojection(
    x: &Pose,
    matches: &[(Point2, Point3)],
    k: &CameraIntrinsics,
    huber_px: f64,
) -> Result<f64> {
    if matches.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    let sum: f64 = matches.iter().map(|m| reprojection_cost(x, k, m, huber_px)).sum();
    Ok(sum / matches.len() as f64)
}

/// Unnormalized fundamental matrix of the pair and its derivatives along
/// the twelve tangent directions `[dt_a, dω_a, dt_b, dω_b]`.
struct EpipolarLinearization {
    f: Matrix3<f64>,
    df: [Matrix3<f64>; 12],
}

fn epipolar_linearization(xa: &Pose, xb: &Pose, k: &CameraIntrinsics) -> Option<EpipolarLinearization> {
    let rbt = xb.rotation_matrix().transpose();
    let r = rbt * xa.rotation_matrix();
    let t = rbt * (xa.translation - xb.translation);
    if t.norm() <= MIN_BASELINE {
        return None;
    }
    let kinv = k.inverse_matrix();
    let kinv_t = kinv.transpose();
    let tx = skew(&t);
    let e = tx * r;
    let mut df = [Matrix3::zeros(); 12];
    for i in 0..3 {
        let ei = Vector3::ith(i, 1.0);
        let d_ta = skew(&(rbt * ei)) * r;
        let d_wa = tx * r * skew(&ei);
        let d_wb = -skew(&(skew(&ei) * t)) * r - tx * skew(&ei) * r;
        df[i] = kinv_t * d_ta * kinv;
        df[3 + i] = kinv_t * d_wa * kinv;
        df[6 + i] = -df[i];
        df[9 + i] = kinv_t * d_wb * kinv;
    }
    Some(EpipolarLinearization {
        f: kinv_t * e * kinv,
        df,
    })
}

fn sampson_with_gradient(lin: &EpipolarLinearization, pa: &Point2, pb: &Point2) -> Option<(f64, [f64; 12])> {
    let ha = Vector3::new(pa.x, pa.y, 1.0);
    let hb = Vector3::new(pb.x, pb.y, 1.0);
    let fa = lin.f * ha;
    let fb = lin.f.transpose() * hb;
    let c = hb.dot(&fa);
    let d = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
    if d <= 1e-15 * lin.f.norm_squared() {
        return None;
    }
    let sd = d.sqrt();
    let mut g = [0.0; 12];
    for (gi, dfi) in g.iter_mut().zip(&lin.df) {
        let dfa = dfi * ha;
        let dfb = dfi.transpose() * hb;
        let dc = hb.dot(&dfa);
        let dd = 2.0 * (fa.x * dfa.x + fa.y * dfa.y + fb.x * dfb.x + fb.y * dfb.y);
        *gi = dc / sd - c * dd / (2.0 * d * sd);
    }
    Some((c / sd, g))
}

/// Signed Sampson residual of one track and its Jacobians with respect to
/// `X_a` and `X_b`; `None` for a degenerate baseline or denominator.
pub fn sampson_residual_jacobian(
    xa: &Pose,
    xb: &Pose,
    k: &CameraIntrinsics,
    pa: &Point2,
    pb: &Point2,
) -> Option<(f64, Matrix1x6, Matrix1x6)> {
    let lin = epipolar_linearization(xa, xb, k)?;
    let (r, g) = sampson_with_gradient(&lin, pa, pb)?;
    Some((r, Matrix1x6::from_row_slice(&g[..6]), Matrix1x6::from_row_slice(&g[6..])))
}

/// Mean Huber Sampson cost of the tracks; `Ok(None)` when the baseline is
/// degenerate and the term is dropped.
pub fn residual_sampson_pair(
    xa: &Pose,
    xb: &Pose,
    tracks: &[(Point2, Point2)],
    k: &CameraIntrinsics,
    sampson_huber_sq: f64,
) -> Result<Option<f64>> {
    if tracks.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    Ok(sampson_pair_cost(xa, xb, tracks, k, sampson_huber_sq))
}

fn sampson_pair_cost(
    xa: &Pose,
    xb: &Pose,
    tracks: &[(Point2, Point2)],
    k: &CameraIntrinsics,
    sampson_huber_sq: f64,
) -> Option<f64> {
    let lin = epipolar_linearization(xa, xb, k)?;
    let delta = sampson_huber_sq.sqrt();
    let ha_hb = |pa: &Point2, pb: &Point2| {
        let ha = Vector3::new(pa.x, pa.y, 1.0);
        let hb = Vector3::new(pb.x, pb.y, 1.0);
        let fa = lin.f * ha;
        let fb = lin.f.transpose() * hb;
        let d = fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y;
        if d <= 1e-15 * lin.f.norm_squared() {
            0.0
        } else {
            huber(hb.dot(&fa).powi(2) / d, delta)
        }
    };
    let sum: f64 = tracks.iter().map(|(a, b)| ha_hb(a, b)).sum();
    Some(sum / tracks.len() as f64)
}

/// Closed-form minimizer of `w D + U² (w − ln w)`.
pub fn weight_update(data_term: f64, u: f64) -> f64 {
    let u2 = u * u;
    u2 / (u2 + data_term)
}

/// `‖P ⊖ X‖² + λ1 π` of frame `k` (only the first part for variants without
/// 2D-3D terms).
pub fn prior_data_term(problem: &RefinementProblem, cfg: &RefineConfig, x: &Pose, prior: &Prior) -> f64 {
    let pose_err = residual_pose_prior(x, &prior.pose, cfg.rotation_weight).norm_squared();
    let reproj = if cfg.variant.uses_2d3d() && !prior.matches.is_empty() {
        cfg.lambda1 * residual_reprojection(x, &prior.matches, &problem.k, cfg.huber_px).unwrap_or(0.0)
    } else {
        0.0
    };
    pose_err + reproj
}

fn relative_term(problem: &RefinementProblem, cfg: &RefineConfig, poses: &[Pose], r: &Relative) -> f64 {
    let (xa, xb) = (&poses[r.from], &poses[r.to]);
    let mut c = residual_relative(xa, xb, &r.z, cfg.rotation_weight).norm_squared();
    if cfg.variant.uses_2d2d() && !r.tracks.is_empty() {
        if let Some(s) = sampson_pair_cost(xa, xb, &r.tracks, &problem.k, cfg.sampson_huber_sq) {
            c += cfg.lambda2 * s;
        }
    }
    c
}

/// Pose-dependent part of the objective with weights held fixed.
fn pose_cost(problem: &RefinementProblem, cfg: &RefineConfig, poses: &[Pose], weights: &[Option<f64>]) -> f64 {
    let priors: Vec<f64> = problem
        .priors
        .par_iter()
        .enumerate()
        .map(|(k, p)| match (p, weights[k]) {
            (Some(p), Some(w)) => w * prior_data_term(problem, cfg, &poses[k], p),
            _ => 0.0,
        })
        .collect();
    let rels: Vec<f64> = problem.relatives.par_iter().map(|r| relative_term(problem, cfg, poses, r)).collect();
    priors.iter().sum::<f64>() + rels.iter().sum::<f64>()
}

fn regularizer(cfg: &RefineConfig, weights: &[Option<f64>]) -> f64 {
    let u2 = cfg.u * cfg.u;
    weights.iter().flatten().map(|w| u2 * (w - w.ln())).sum()
}

/// Full objective including the weight regularizer.
pub fn objective(problem: &RefinementProblem, cfg: &RefineConfig, state: &RefinementState) -> f64 {
    pose_cost(problem, cfg, &state.poses, &state.weights) + regularizer(cfg, &state.weights)
}

/// Closed-form weights for the current poses.
pub fn e_step(problem: &RefinementProblem, cfg: &RefineConfig, poses: &[Pose]) -> Vec<Option<f64>> {
    problem
        .priors
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            p.as_ref()
                .map(|p| weight_update(prior_data_term(problem, cfg, &poses[k], p), cfg.u))
        })
        .collect()
}

/// Gauss-Newton contribution of one factor: touched frames, Hessian
/// block and gradient.
enum Block {
    Unary(usize, Matrix6<f64>, Vector6<f64>),
    Binary(usize, usize, SMatrix<f64, 12, 12>, SMatrix<f64, 12, 1>),
}

fn prior_block(problem: &RefinementProblem, cfg: &RefineConfig, k: usize, x: &Pose, prior: &Prior, w: f64) -> Block {
    let r = residual_pose_prior(x, &prior.pose, cfg.rotation_weight);
    let j = prior_jacobian(x, &prior.pose, cfg.rotation_weight);
    let mut h = j.transpose() * j * w;
    let mut g = j.transpose() * r * w;
    if cfg.variant.uses_2d3d() && !prior.matches.is_empty() {
        let scale = w * cfg.lambda1 / prior.matches.len() as f64;
        for m in &prior.matches {
            if let Some((e, jr)) = reprojection_residual(x, &problem.k, m) {
                let s = scale * huber_slope(e.norm_squared(), cfg.huber_px);
                h += jr.transpose() * jr * s;
                g += jr.transpose() * e * s;
            }
        }
    }
    Block::Unary(k, h, g)
}

fn relative_block(problem: &RefinementProblem, cfg: &RefineConfig, poses: &[Pose], rel: &Relative) -> Block {
    let (xa, xb) = (&poses[rel.from], &poses[rel.to]);
    let r = residual_relative(xa, xb, &rel.z, cfg.rotation_weight);
    let (ja, jb) = relative_jacobians(xa, xb, &rel.z, cfg.rotation_weight);
    let mut j = SMatrix::<f64, 6, 12>::zeros();
    j.fixed_view_mut::<6, 6>(0, 0).copy_from(&ja);
    j.fixed_view_mut::<6, 6>(0, 6).copy_from(&jb);
    let mut h = j.transpose() * j;
    let mut g = j.transpose() * r;
    if cfg.variant.uses_2d2d() && !rel.tracks.is_empty() {
        if let Some(lin) = epipolar_linearization(xa, xb, &problem.k) {
            let scale = cfg.lambda2 / rel.tracks.len() as f64;
            let delta = cfg.sampson_huber_sq.sqrt();
            for (pa, pb) in &rel.tracks {
                if let Some((res, grad)) = sampson_with_gradient(&lin, pa, pb) {
                    let jr = SMatrix::<f64, 1, 12>::from_row_slice(&grad);
                    let s = scale * huber_slope(res * res, delta);
                    h += jr.transpose() * jr * s;
                    g += jr.transpose() * res * s;
                }
            }
        }
    }
    Block::Binary(rel.from, rel.to, h, g)
}

/// Levenberg-Marquardt over all poses with weights fixed. Steps that do not
/// lower the cost are rejected, so the cost never increases.
pub fn m_step(problem: &RefinementProblem, cfg: &RefineConfig, state: &mut RefinementState) -> Result<()> {
    let n = problem.len();
    if n == 0 {
        return Ok(());
    }
    let bw = problem.half_bandwidth();
    let mut current = pose_cost(problem, cfg, &state.poses, &state.weights);
    if !current.is_finite() {
        return Err(Error::SolverDiverged(format!("non-finite cost {current}")));
    }
    let mut lambda = 1e-4;
    for _ in 0..cfg.max_lm_iters {
        let poses = &state.poses;
        let mut blocks: Vec<Block> = problem
            .priors
            .par_iter()
            .enumerate()
            .filter_map(|(k, p)| {
                let w = state.weights[k]?;
                p.as_ref().map(|p| prior_block(problem, cfg, k, &poses[k], p, w))
            })
            .collect();
        blocks.extend(
            problem
                .relatives
                .par_iter()
                .map(|r| relative_block(problem, cfg, poses, r))
                .collect::<Vec<_>>(),
        );

        let mut diag = vec![0.0; 6 * n];
        let mut grad = vec![0.0; 6 * n];
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for b in &blocks {
            match b {
                Block::Unary(k, h, g) => {
                    for r in 0..6 {
                        grad[6 * k + r] += g[r];
                        for c in 0..=r {
                            entries.push((6 * k + r, 6 * k + c, h[(r, c)]));
                        }
                    }
                }
                Block::Binary(a, bb, h, g) => {
                    let idx = |i: usize| if i < 6 { 6 * a + i } else { 6 * bb + i - 6 };
                    for r in 0..12 {
                        grad[idx(r)] += g[r];
                        for c in 0..12 {
                            let (gi, gj) = (idx(r), idx(c));
                            if gi >= gj {
                                entries.push((gi, gj, h[(r, c)]));
                            }
                        }
                    }
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::SolverDiverged("non-finite gradient".into()));
        }
        for &(i, j, v) in &entries {
            if i == j {
                diag[i] += v;
            }
        }

        let mut accepted = false;
        for _ in 0..10 {
            let mut m = BandedMatrix::zeros(6 * n, bw);
            for &(i, j, v) in &entries {
                m.add(i, j, v);
            }
            for (i, d) in diag.iter().enumerate() {
                m.add(i, i, lambda * d.max(1e-9) + 1e-12);
            }
            let Some(chol) = m.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&grad);
            let trial: Vec<Pose> = state
                .poses
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let d = Vector6::from_iterator((0..6).map(|i| -step[6 * k + i]));
                    p.retract(&d)
                })
                .collect();
            let c = pose_cost(problem, cfg, &trial, &state.weights);
            if c.is_finite() && c < current {
                let gain = current - c;
                state.poses = trial;
                current = c;
                lambda = (lambda * 0.2).max(1e-12);
                accepted = gain > 1e-12 * (1.0 + current);
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(())
}

/// Seeds take their prior; other frames chain relative poses from the
/// nearest seed (ties go to the earlier seed).
pub fn initialize_seeds(problem: &RefinementProblem, min_matches: usize) -> Result<Vec<Pose>> {
    let n = problem.len();
    let seeds: Vec<usize> = (0..n)
        .filter(|&k| problem.priors[k].as_ref().is_some_and(|p| p.matches.len() >= min_matches))
        .collect();
    if seeds.is_empty() {
        return Err(Error::NoSeeds);
    }
    let odo = |a: usize, b: usize| -> Result<Pose> {
        problem
            .relatives
            .iter()
            .find(|r| r.from == a && r.to == b)
            .map(|r| r.z)
            .or_else(|| problem.relatives.iter().find(|r| r.from == b && r.to == a).map(|r| r.z.inverse()))
            .ok_or(Error::MissingOdometry {
                from: problem.frames[a],
                to: problem.frames[b],
            })
    };
    let nearest: Vec<usize> = (0..n)
        .map(|k| {
            let pos = seeds.partition_point(|&s| s <= k);
            match (pos.checked_sub(1).map(|i| seeds[i]), seeds.get(pos).copied()) {
                (Some(b), Some(a)) if a - k < k - b => a,
                (Some(b), _) => b,
                (None, Some(a)) => a,
                (None, None) => unreachable!(),
            }
        })
        .collect();
    let mut poses = vec![Pose::identity(); n];
    for k in 0..n {
        let s = nearest[k];
        if s == k {
            poses[k] = problem.priors[k].as_ref().expect("seed has a prior").pose;
        } else if s < k {
            poses[k] = poses[k - 1].compose(&odo(k - 1, k)?);
        }
    }
    for k in (0..n).rev() {
        if nearest[k] > k {
            poses[k] = poses[k + 1].compose(&odo(k, k + 1)?.inverse());
        }
    }
    Ok(poses)
}

/// Alternates E- and M-steps from the seeded initialization until the
/// largest weight change falls below the tolerance.
pub fn refine(problem: &RefinementProblem, cfg: &RefineConfig) -> Result<RefineOutput> {
    let poses = initialize_seeds(problem, cfg.min_seed_matches)?;
    refine_from(problem, cfg, poses)
}

/// As [`refine`], starting from the given poses.
pub fn refine_from(problem: &RefinementProblem, cfg: &RefineConfig, poses: Vec<Pose>) -> Result<RefineOutput> {
    cfg.validate()?;
    problem.validate()?;
    let start = Instant::now();
    let elapsed = || start.elapsed().as_secs_f64() * 1e3;
    let mut state = RefinementState {
        weights: problem.priors.iter().map(|p| p.as_ref().map(|_| 1.0)).collect(),
        poses,
        iteration: 0,
    };
    let mut log = vec![LogEntry {
        iter: 0,
        step: Step::Init,
        objective: objective(problem, cfg, &state),
        max_dw: 0.0,
        runtime_ms: elapsed(),
    }];
    for t in 0..cfg.max_em_iters {
        state.iteration = t;
        let w = e_step(problem, cfg, &state.poses);
        let max_dw = w
            .iter()
            .zip(&state.weights)
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0, f64::max);
        state.weights = w;
        log.push(LogEntry {
            iter: t,
            step: Step::E,
            objective: objective(problem, cfg, &state),
            max_dw,
            runtime_ms: elapsed(),
        });
        if t >= 1 && max_dw < cfg.weight_tolerance {
            break;
        }
        m_step(problem, cfg, &mut state)?;
        log.push(LogEntry {
            iter: t,
            step: Step::M,
            objective: objective(problem, cfg, &state),
            max_dw,
            runtime_ms: elapsed(),
        });
    }
    Ok(RefineOutput { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, pose_distance, project};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};
    use rand_pcg::Pcg64;
    use std::f64::consts::FRAC_PI_2;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    fn random_pose(rng: &mut Pcg64, t_scale: f64) -> Pose {
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(
            rng.random_range(-t_scale..t_scale),
            rng.random_range(-t_scale..t_scale),
            rng.random_range(-t_scale..t_scale),
        );
        Pose::new(exp_so3(&w), t)
    }

    fn perturbed(rng: &mut Pcg64, p: &Pose, t: f64, r: f64) -> Pose {
        if t == 0.0 && r == 0.0 {
            return *p;
        }
        p.retract(&Vector6::from_fn(|i, _| {
            if i < 3 {
                rng.random_range(-t..t)
            } else {
                rng.random_range(-r..r)
            }
        }))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1e-6_f64).max(a.abs().max(b.abs()))
    }

    #[test]
    fn prior_residual_examples() {
        let x = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(residual_pose_prior(&x, &x, 1.0), Vector6::zeros());
        assert_eq!(residual_pose_prior(&x, &Pose::identity(), 1.0), Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let rz = Pose::new(exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2)), Vector3::zeros());
        let r = residual_pose_prior(&rz, &Pose::identity(), 1.0);
        assert!((r - Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2)).norm() < 1e-9);
        // relative residual of two frames that exactly match z
        let a = Pose::new(exp_so3(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0));
        let z = Pose::new(exp_so3(&Vector3::new(0.0, -0.2, 0.05)), Vector3::new(0.5, 0.0, 1.0));
        let b = a.compose(&z);
        assert!(residual_relative(&a, &b, &z, 1.0).norm() < 1e-12);
        let shifted = Pose::new(b.rotation, b.translation + a.rotation * Vector3::new(1.0, 0.0, 0.0));
        let r = residual_relative(&a, &shifted, &z, 1.0);
        assert!((r - Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn reprojection_term_examples() {
        let k = camera();
        let x = Pose::identity();
        let pts: Vec<(Point2, Point3)> = (0..10)
            .map(|i| {
                let p = Point3::new(i as f64 * 0.3 - 1.5, 0.2 * i as f64 - 1.0, 5.0 + i as f64);
                (project(&x, &k, &p).unwrap(), p)
            })
            .collect();
        assert!(residual_reprojection(&x, &pts, &k, 3.0).unwrap() < 1e-12);
        let one = vec![(pts[0].0 + Point2::new(1.0, 0.0), pts[0].1)];
        assert!((residual_reprojection(&x, &one, &k, 3.0).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(residual_reprojection(&x, &[], &k, 3.0), Err(Error::EmptyMatchSet)));

        let mut rng = Pcg64::seed_from_u64(4);
        let moved = perturbed(&mut rng, &x, 0.2, 0.05);
        let oracle: f64 = pts
            .iter()
            .map(|(u, p)| {
                let pc = moved.rotation_matrix().transpose() * (p - moved.translation);
                let px = Point2::new(500.0 * pc.x / pc.z + 320.0, 500.0 * pc.y / pc.z + 240.0);
                let e = (px - u).norm();
                if e <= 3.0 { e * e } else { 6.0 * e - 9.0 }
            })
            .sum::<f64>()
            / pts.len() as f64;
        assert!(rel_err(residual_reprojection(&moved, &pts, &k, 3.0).unwrap(), oracle) < 1e-12);
    }

    #[test]
    fn sampson_term_examples() {
        let k = camera();
        let xa = Pose::identity();
        let xb = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let tracks: Vec<(Point2, Point2)> = (0..20)
            .map(|i| {
                let p = Point3::new(i as f64 * 0.4 - 4.0, (i % 5) as f64 - 2.0, 8.0 + i as f64);
                (project(&xa, &k, &p).unwrap(), project(&xb, &k, &p).unwrap())
            })
            .collect();
        assert!(residual_sampson_pair(&xa, &xb, &tracks, &k, 4.0).unwrap().unwrap() < 1e-18);
        let moved = Pose::new(exp_so3(&Vector3::new(0.0, 0.05, 0.0)), Vector3::new(0.3, 0.0, 1.0));
        let c = residual_sampson_pair(&xa, &moved, &tracks, &k, 4.0).unwrap().unwrap();
        assert!(c > 0.0);
        let f = crate::geometry::fundamental_from_poses(&xa, &moved, &k, &k).unwrap();
        let oracle: f64 = tracks
            .iter()
            .map(|(a, b)| {
                let s = crate::geometry::sampson_error(&f, a, b).unwrap();
                if s <= 4.0 { s } else { 4.0 * s.sqrt() - 4.0 }
            })
            .sum::<f64>()
            / tracks.len() as f64;
        assert!(rel_err(c, oracle) < 1e-10);
        assert_eq!(residual_sampson_pair(&xa, &xa, &tracks, &k, 4.0).unwrap(), None);
        assert!(matches!(residual_sampson_pair(&xa, &xb, &[], &k, 4.0), Err(Error::EmptyMatchSet)));
    }

    fn central_difference<const R: usize>(
        f: impl Fn(&Vector6<f64>) -> SMatrix<f64, R, 1>,
    ) -> SMatrix<f64, R, 6> {
        let h = 1e-6;
        let mut j = SMatrix::<f64, R, 6>::zeros();
        for i in 0..6 {
            let mut d = Vector6::zeros();
            d[i] = h;
            let col = (f(&d) - f(&-d)) / (2.0 * h);
            j.set_column(i, &col);
        }
        j
    }

    fn jac_close<const R: usize>(a: &SMatrix<f64, R, 6>, b: &SMatrix<f64, R, 6>) -> bool {
        (a - b).norm() <= 1e-5 * a.norm().max(b.norm()).max(1e-3)
    }

    #[test]
    fn prior_and_relative_jacobians_match_finite_differences() {
        let mut rng = Pcg64::seed_from_u64(10);
        for _ in 0..100 {
            let x = random_pose(&mut rng, 5.0);
            let p = perturbed(&mut rng, &x, 1.0, 0.8);
            let j = prior_jacobian(&x, &p, 1.3);
            let fd = central_difference(|d| residual_pose_prior(&x.retract(d), &p, 1.3));
            assert!(jac_close(&j, &fd));

            let xa = random_pose(&mut rng, 5.0);
            let xb = random_pose(&mut rng, 5.0);
            let z = perturbed(&mut rng, &xa.inverse().compose(&xb), 0.5, 0.5);
            let (ja, jb) = relative_jacobians(&xa, &xb, &z, 0.7);
            let fa = central_difference(|d| residual_relative(&xa.retract(d), &xb, &z, 0.7));
            let fb = central_difference(|d| residual_relative(&xa, &xb.retract(d), &z, 0.7));
            assert!(jac_close(&ja, &fa));
            assert!(jac_close(&jb, &fb));
        }
    }

    #[test]
    fn reprojection_and_sampson_jacobians_match_finite_differences() {
        let k = camera();
        let mut rng = Pcg64::seed_from_u64(11);
        for _ in 0..100 {
            let x = random_pose(&mut rng, 2.0);
            let pc = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..30.0));
            let obs = (Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)), x.transform_point(&pc));
            let (_, j) = reprojection_residual(&x, &k, &obs).unwrap();
            let fd = central_difference(|d| reprojection_residual(&x.retract(d), &k, &obs).unwrap().0);
            assert!(jac_close(&j, &fd));

            let xa = random_pose(&mut rng, 2.0);
            let xb = xa.compose(&Pose::new(
                exp_so3(&Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))),
                Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.5..1.5)),
            ));
            let p = xa.transform_point(&Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(5.0..30.0)));
            let noise = |rng: &mut Pcg64| Point2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let Ok(pa) = project(&xa, &k, &p) else { continue };
            let Ok(pb) = project(&xb, &k, &p) else { continue };
            let (pa, pb) = (pa + noise(&mut rng), pb + noise(&mut rng));
            let (_, ja, jb) = sampson_residual_jacobian(&xa, &xb, &k, &pa, &pb).unwrap();
            let r = |a: &Pose, b: &Pose| SMatrix::<f64, 1, 1>::new(sampson_residual_jacobian(a, b, &k, &pa, &pb).unwrap().0);
            let fa = central_difference(|d| r(&xa.retract(d), &xb));
            let fb = central_difference(|d| r(&xa, &xb.retract(d)));
            assert!(jac_close(&ja, &fa), "{ja} {fa}");
            assert!(jac_close(&jb, &fb), "{jb} {fb}");
        }
    }

    #[test]
    fn e_step_examples() {
        assert_eq!(weight_update(0.0, 0.5), 1.0);
        assert!((weight_update(0.25, 0.5) - 0.5).abs() < 1e-15);
        assert!((weight_update(0.75, 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn e_step_matches_grid_search() {
        let mut rng = Pcg64::seed_from_u64(12);
        let u = 0.5;
        for _ in 0..100 {
            let d: f64 = 10f64.powf(rng.random_range(-4.0..2.0));
            let f = |w: f64| w * d + u * u * (w - w.ln());
            let n = 200_000;
            let step = (1.0 - 1e-4) / n as f64;
            let (best, _) = (0..=n)
                .map(|i| 1e-4 + i as f64 * step)
                .map(|w| (w, f(w)))
                .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            let w = weight_update(d, u).max(1e-4);
            assert!((w - best).abs() <= step, "{d}: {w} vs {best}");
        }
    }

    proptest! {
        #[test]
        fn weights_stay_in_unit_interval(d in 0.0f64..1e6, u in 1e-3f64..10.0) {
            let w = weight_update(d, u);
            prop_assert!(w > 0.0 && w <= 1.0);
        }
    }

    /// Straight drive along +z with points on both sides.
    struct Chain {
        truth: Vec<Pose>,
        problem: RefinementProblem,
    }

    fn chain(n: usize, seed: u64, prior_noise: f64, odo_noise: f64, outliers: &[usize], pixel_noise: f64) -> Chain {
        let k = camera();
        let mut rng = Pcg64::seed_from_u64(seed);
        let truth: Vec<Pose> = (0..n)
            .map(|i| Pose::new(exp_so3(&Vector3::new(0.0, 0.01 * i as f64, 0.0)), Vector3::new(0.05 * i as f64, 0.0, i as f64)))
            .collect();
        let world: Vec<Point3> = (0..n * 20)
            .map(|i| {
                let side = if i % 2 == 0 { -1.0 } else { 1.0 };
                Point3::new(side * rng.random_range(3.0..8.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..(n as f64 + 30.0)))
            })
            .collect();
        let gauss = Normal::new(0.0, 1.0).unwrap();
        let g = |s: f64, rng: &mut Pcg64| if s == 0.0 { 0.0 } else { s * gauss.sample(rng) };
        let visible = |x: &Pose, p: &Point3| project(x, &k, p).ok().filter(|u| k.contains(u));
        let priors = (0..n)
            .map(|i| {
                let mut pose = perturbed(&mut rng, &truth[i], prior_noise, prior_noise * 0.05);
                let mut gen = truth[i];
                if outliers.contains(&i) {
                    gen = Pose::new(truth[i].rotation, truth[i].translation + Vector3::new(5.0, 0.0, 0.0));
                    pose = gen;
                }
                let matches = world
                    .iter()
                    .filter_map(|p| visible(&gen, p).map(|u| (u + Point2::new(g(pixel_noise, &mut rng), g(pixel_noise, &mut rng)), *p)))
                    .take(60)
                    .collect();
                Some(Prior { pose, matches })
            })
            .collect();
        let relatives = (1..n)
            .map(|i| {
                let zt = truth[i - 1].inverse().compose(&truth[i]);
                let z = perturbed(&mut rng, &zt, odo_noise, odo_noise * 0.1);
                let tracks = world
                    .iter()
                    .filter_map(|p| Some((visible(&truth[i - 1], p)?, visible(&truth[i], p)?)))
                    .take(60)
                    .map(|(a, b)| {
                        (
                            a + Point2::new(g(pixel_noise, &mut rng), g(pixel_noise, &mut rng)),
                            b + Point2::new(g(pixel_noise, &mut rng), g(pixel_noise, &mut rng)),
                        )
                    })
                    .collect();
                Relative { from: i - 1, to: i, z, tracks }
            })
            .collect();
        Chain {
            truth,
            problem: RefinementProblem {
                frames: (0..n).collect(),
                priors,
                relatives,
                k,
            },
        }
    }

    fn rmse(a: &[Pose], b: &[Pose]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x.translation - y.translation).norm_squared()).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn m_step_keeps_noiseless_ground_truth() {
        let c = chain(8, 1, 0.0, 0.0, &[], 0.0);
        let cfg = RefineConfig::default();
        let mut state = RefinementState {
            poses: c.truth.clone(),
            weights: vec![Some(1.0); 8],
            iteration: 0,
        };
        m_step(&c.problem, &cfg, &mut state).unwrap();
        for (a, b) in state.poses.iter().zip(&c.truth) {
            let (r, t) = pose_distance(a, b);
            assert!(r < 1e-9 && t < 1e-9);
        }
    }

    #[test]
    fn single_frame_converges_to_prior() {
        let k = camera();
        let p = Pose::new(exp_so3(&Vector3::new(0.2, -0.1, 0.4)), Vector3::new(3.0, 1.0, -2.0));
        let problem = RefinementProblem {
            frames: vec![0],
            priors: vec![Some(Prior { pose: p, matches: vec![] })],
            relatives: vec![],
            k,
        };
        let cfg = RefineConfig { min_seed_matches: 0, max_lm_iters: 50, ..Default::default() };
        let mut state = RefinementState {
            poses: vec![Pose::identity()],
            weights: vec![Some(1.0)],
            iteration: 0,
        };
        m_step(&problem, &cfg, &mut state).unwrap();
        let (r, t) = pose_distance(&state.poses[0], &p);
        assert!(r < 1e-9 && t < 1e-9, "{r} {t}");
    }

    #[test]
    fn noiseless_problem_converges_in_two_iterations() {
        let c = chain(10, 2, 0.0, 0.0, &[], 0.0);
        let out = refine(&c.problem, &RefineConfig::default()).unwrap();
        assert!(out.state.iteration <= 1);
        assert!(out.state.weights.iter().all(|w| (w.unwrap() - 1.0).abs() < 1e-12));
        assert!(rmse(&out.state.poses, &c.truth) < 1e-9);
    }

    #[test]
    fn initialize_seeds_examples() {
        let c = chain(12, 3, 0.0, 0.0, &[], 0.0);
        let all = initialize_seeds(&c.problem, 0).unwrap();
        for (a, p) in all.iter().zip(&c.problem.priors) {
            assert_eq!(*a, p.as_ref().unwrap().pose);
        }
        let mut one = c.problem.clone();
        for p in one.priors.iter_mut().skip(1) {
            p.as_mut().unwrap().matches.clear();
        }
        let init = initialize_seeds(&one, 10).unwrap();
        assert!(rmse(&init, &c.truth) < 1e-9);
        assert!(matches!(initialize_seeds(&c.problem, 1000), Err(Error::NoSeeds)));

        let mut gap = c.problem.clone();
        gap.relatives.remove(5);
        gap.priors[6].as_mut().unwrap().matches.clear();
        for p in gap.priors.iter_mut().skip(6) {
            p.as_mut().unwrap().matches.clear();
        }
        assert!(matches!(initialize_seeds(&gap, 10), Err(Error::MissingOdometry { .. })));
    }

    #[test]
    fn nearest_seed_ties_go_to_earlier_seed() {
        let mut c = chain(5, 4, 0.0, 0.0, &[], 0.0);
        // seeds at 0 and 4 with distinct offsets; frame 2 is equidistant
        for i in [1, 2, 3] {
            c.problem.priors[i].as_mut().unwrap().matches.clear();
        }
        let shift = Vector3::new(0.0, 1.0, 0.0);
        let p4 = c.problem.priors[4].as_mut().unwrap();
        p4.pose = Pose::new(p4.pose.rotation, p4.pose.translation + shift);
        let init = initialize_seeds(&c.problem, 10).unwrap();
        assert!((init[2].translation - c.truth[2].translation).norm() < 1e-9);
        assert!((init[3].translation - c.truth[3].translation - shift).norm() < 1e-9);
    }

    #[test]
    fn outlier_priors_are_downweighted_and_rmse_drops() {
        let outliers = [7, 15, 22, 31, 40];
        let c = chain(50, 5, 0.03, 0.01, &outliers, 1.0);
        let cfg = RefineConfig::default();
        let init = initialize_seeds(&c.problem, cfg.min_seed_matches).unwrap();
        let out = refine_from(&c.problem, &cfg, init.clone()).unwrap();
        for (k, w) in out.state.weights.iter().enumerate() {
            let w = w.unwrap();
            if outliers.contains(&k) {
                assert!(w < 0.3, "outlier {k}: {w}");
            } else {
                assert!(w > 0.7, "inlier {k}: {w}");
            }
        }
        let before = rmse(&init, &c.truth);
        let after = rmse(&out.state.poses, &c.truth);
        assert!(after * 5.0 <= before, "{before} -> {after}");
    }

    #[test]
    fn objective_never_increases() {
        for variant in Variant::ALL {
            let c = chain(30, 6, 0.05, 0.02, &[5, 17], 1.0);
            let cfg = RefineConfig { variant, ..Default::default() };
            let out = refine(&c.problem, &cfg).unwrap();
            for w in out.log.windows(2) {
                assert!(w[1].objective <= w[0].objective * (1.0 + 1e-12), "{variant}: {:?}", w);
            }
        }
    }

    #[test]
    fn deleting_a_zero_weight_prior_leaves_other_frames() {
        let c = chain(30, 8, 0.03, 0.01, &[12], 1.0);
        let cfg = RefineConfig { max_lm_iters: 200, ..Default::default() };
        let em = refine(&c.problem, &cfg).unwrap();
        assert!(em.state.weights[12].unwrap() < 0.02);

        let solve = |problem: &RefinementProblem, weights: Vec<Option<f64>>| {
            let mut state = RefinementState { poses: em.state.poses.clone(), weights, iteration: 0 };
            m_step(problem, &cfg, &mut state).unwrap();
            state.poses
        };
        let mut weights = em.state.weights.clone();
        weights[12] = Some(1e-9);
        let kept = solve(&c.problem, weights.clone());
        weights[12] = None;
        let reduced = c.problem.without_prior(12);
        assert!(reduced.validate().is_ok());
        let dropped = solve(&reduced, weights);
        let moved = kept
            .iter()
            .zip(&dropped)
            .enumerate()
            .filter(|(k, _)| *k != 12)
            .map(|(_, (a, b))| pose_distance(a, b).1.max(pose_distance(a, b).0))
            .fold(0.0, f64::max);
        assert!(moved < 1e-6, "{moved}");
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }
}
