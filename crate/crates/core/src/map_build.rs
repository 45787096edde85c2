//! Sparse session maps from posed frames: epipolar pruning, triangulation
//! and structure-only refinement with the camera poses held fixed.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    fundamental_from_poses, project, project_with_jacobian, sampson_error, CameraIntrinsics,
    MatchSet2D2D, Point2, Point3, Pose,
};
use crate::localize::Source;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapFrame {
    pub id: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: u64,
    pub position: Point3,
    pub observations: Vec<(usize, Point2)>,
}

/// Sparse 3D reconstruction of one reference traversal.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionMap {
    pub session_id: u32,
    pub source: Source,
    pub frames: Vec<MapFrame>,
    pub points: Vec<MapPoint>,
    /// Retained observations reproject within this many pixels.
    pub prune_threshold_px: f64,
}

impl SessionMap {
    pub fn frame(&self, id: usize) -> Option<&MapFrame> {
        self.frames
            .binary_search_by_key(&id, |f| f.id)
            .ok()
            .map(|i| &self.frames[i])
    }

    /// Sum of squared reprojection errors over every observation.
    pub fn total_reprojection_error(&self) -> f64 {
        self.points
            .iter()
            .map(|p| point_cost(self, &p.position, &p.observations))
            .sum()
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for p in &self.points {
            if p.observations.len() < 2 {
                return Err(format!("point {} has {} observations", p.id, p.observations.len()));
            }
            for (fid, uv) in &p.observations {
                let f = self
                    .frame(*fid)
                    .ok_or_else(|| format!("point {} observed in missing frame {fid}", p.id))?;
                let e = project(&f.pose, &f.intrinsics, &p.position)
                    .map(|q| (q - uv).norm())
                    .unwrap_or(f64::INFINITY);
                if e > self.prune_threshold_px {
                    return Err(format!("point {} frame {fid} reprojects {e:.3}px", p.id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapBuildConfig {
    /// Sampson threshold, squared pixels.
    pub epipolar_threshold: f64,
    pub reprojection_threshold_px: f64,
    pub min_angle_deg: f64,
}

impl Default for MapBuildConfig {
    fn default() -> Self {
        Self {
            epipolar_threshold: 4.0,
            reprojection_threshold_px: 3.0,
            min_angle_deg: 1.0,
        }
    }
}

/// Drops correspondences whose Sampson error under the known poses exceeds `threshold`.
pub fn prune_epipolar(
    matches: &MatchSet2D2D,
    pose_a: &Pose,
    pose_b: &Pose,
    k: &CameraIntrinsics,
    threshold: f64,
) -> Result<MatchSet2D2D> {
    let f = fundamental_from_poses(pose_a, pose_b, k, k)?;
    let pairs = matches
        .pairs
        .iter()
        .filter(|(a, b)| matches!(sampson_error(&f, a, b), Ok(e) if e <= threshold))
        .copied()
        .collect();
    Ok(MatchSet2D2D {
        frame_a: matches.frame_a,
        frame_b: matches.frame_b,
        pairs,
    })
}

fn max_ray_angle(observations: &[(Pose, CameraIntrinsics, Point2)]) -> f64 {
    let rays: Vec<Vector3<f64>> = observations
        .iter()
        .map(|(pose, k, uv)| pose.rotation * k.bearing(uv))
        .collect();
    let mut best = 0.0f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            best = best.max(rays[i].dot(&rays[j]).clamp(-1.0, 1.0).acos());
        }
    }
    best
}

fn dlt(observations: &[(Pose, CameraIntrinsics, Point2)]) -> Option<Point3> {
    let mut ata = Matrix4::<f64>::zeros();
    for (pose, k, uv) in observations {
        let rt = pose.rotation_matrix().transpose();
        let tc = -(rt * pose.translation);
        let mut p = nalgebra::Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        p.set_column(3, &tc);
        let x = (uv.x - k.cx) / k.fx;
        let y = (uv.y - k.cy) / k.fy;
        for row in [x * p.row(2) - p.row(0), y * p.row(2) - p.row(1)] {
            let r = row / row.norm().max(1e-300);
            ata += r.transpose() * r;
        }
    }
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(imin);
    if h[3].abs() < 1e-12 {
        return None;
    }
    Some(Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

fn reprojection_cost(observations: &[(Pose, CameraIntrinsics, Point2)], x: &Point3) -> f64 {
    observations
        .iter()
        .map(|(pose, k, uv)| match project(pose, k, x) {
            Ok(p) => (p - uv).norm_squared(),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Levenberg-Marquardt on a single point; never returns a point with higher cost.
fn refine_point(observations: &[(Pose, CameraIntrinsics, Point2)], init: &Point3, max_iters: usize) -> Point3 {
    let mut x = *init;
    let mut cost = reprojection_cost(observations, &x);
    if !cost.is_finite() {
        return x;
    }
    let mut lambda = 1e-3;
    for _ in 0..max_iters {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (pose, k, uv) in observations {
            let Ok((p, jpose)) = project_with_jacobian(pose, k, &x) else {
                return x;
            };
            // d(pixel)/d(point) = -d(pixel)/d(translation)
            let j = -jpose.fixed_view::<2, 3>(0, 0);
            let e = p - uv;
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        if g.norm() < 1e-14 {
            break;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h;
            for i in 0..3 {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let cand = x - chol.solve(&g);
            let c = reprojection_cost(observations, &cand);
            if c < cost {
                let done = (cost - c) <= 1e-15 * (1.0 + cost);
                x = cand;
                cost = c;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    x
}

/// Linear triangulation refined by minimizing reprojection error.
pub fn triangulate(observations: &[(Pose, CameraIntrinsics, Point2)], min_angle_deg: f64) -> Result<Point3> {
    if observations.len() < 2 {
        return Err(Error::InsufficientParallax { angle_deg: 0.0 });
    }
    let angle = max_ray_angle(observations).to_degrees();
    if angle < min_angle_deg {
        return Err(Error::InsufficientParallax { angle_deg: angle });
    }
    let init = dlt(observations).ok_or(Error::InsufficientParallax { angle_deg: angle })?;
    let in_front = |x: &Point3| {
        observations
            .iter()
            .all(|(pose, _, _)| pose.inverse_transform_point(x).z > 0.0)
    };
    if !in_front(&init) {
        return Err(Error::CheiralityViolation);
    }
    let x = refine_point(observations, &init, 30);
    if !in_front(&x) {
        return Err(Error::CheiralityViolation);
    }
    Ok(x)
}

fn point_cost(map: &SessionMap, x: &Point3, obs: &[(usize, Point2)]) -> f64 {
    reprojection_cost(&gather(map, obs), x)
}

fn gather(map: &SessionMap, obs: &[(usize, Point2)]) -> Vec<(Pose, CameraIntrinsics, Point2)> {
    obs.iter()
        .filter_map(|(fid, uv)| map.frame(*fid).map(|f| (f.pose, f.intrinsics, *uv)))
        .collect()
}

/// Structure-only bundle adjustment. Points are independent once the poses
/// are fixed, so each one is refined on its own.
pub fn refine_structure(map: &SessionMap) -> SessionMap {
    let points = map
        .points
        .par_iter()
        .map(|p| {
            let obs = gather(map, &p.observations);
            MapPoint {
                position: refine_point(&obs, &p.position, 50),
                ..p.clone()
            }
        })
        .collect();
    SessionMap {
        points,
        ..map.clone()
    }
}

/// A feature tracked across reference frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub observations: Vec<(usize, Point2)>,
}

/// Builds a session map from tracks: every observation is checked against
/// the track's first one with the epipolar test, survivors are
/// triangulated, observations beyond the reprojection threshold dropped,
/// and the structure refined.
pub fn build_map(
    session_id: u32,
    source: Source,
    mut frames: Vec<MapFrame>,
    tracks: &[Track],
    cfg: &MapBuildConfig,
) -> SessionMap {
    frames.sort_by_key(|f| f.id);
    let mut map = SessionMap {
        session_id,
        source,
        frames,
        points: Vec::new(),
        prune_threshold_px: cfg.reprojection_threshold_px,
    };
    let points: Vec<MapPoint> = tracks
        .par_iter()
        .filter_map(|t| build_point(&map, t, cfg))
        .collect();
    map.points = points;
    let refined = refine_structure(&map);
    // refinement never increases cost but can push a marginal observation
    // over the threshold; re-check
    let points = refined
        .points
        .into_iter()
        .filter_map(|mut p| {
            p.observations.retain(|(fid, uv)| {
                let f = map.frame(*fid).unwrap();
                matches!(project(&f.pose, &f.intrinsics, &p.position), Ok(q) if (q - uv).norm() <= cfg.reprojection_threshold_px)
            });
            (p.observations.len() >= 2).then_some(p)
        })
        .collect();
    map.points = points;
    map
}

fn build_point(map: &SessionMap, track: &Track, cfg: &MapBuildConfig) -> Option<MapPoint> {
    let mut obs: Vec<(usize, Point2)> = track
        .observations
        .iter()
        .filter(|(fid, _)| map.frame(*fid).is_some())
        .copied()
        .collect();
    if obs.len() < 2 {
        return None;
    }
    let (ref_id, ref_uv) = obs[0];
    let ref_frame = map.frame(ref_id)?;
    let mut kept = vec![(ref_id, ref_uv)];
    for &(fid, uv) in &obs[1..] {
        let f = map.frame(fid)?;
        let single = MatchSet2D2D {
            frame_a: ref_id,
            frame_b: fid,
            pairs: vec![(ref_uv, uv)],
        };
        if let Ok(pruned) = prune_epipolar(&single, &ref_frame.pose, &f.pose, &f.intrinsics, cfg.epipolar_threshold) {
            if !pruned.is_empty() {
                kept.push((fid, uv));
            }
        }
    }
    obs = kept;
    for _ in 0..2 {
        if obs.len() < 2 {
            return None;
        }
        let x = triangulate(&gather(map, &obs), cfg.min_angle_deg).ok()?;
        let before = obs.len();
        obs.retain(|(fid, uv)| {
            let f = map.frame(*fid).unwrap();
            matches!(project(&f.pose, &f.intrinsics, &x), Ok(q) if (q - uv).norm() <= cfg.reprojection_threshold_px)
        });
        if obs.len() == before {
            return Some(MapPoint {
                id: track.id,
                position: x,
                observations: obs,
            });
        }
    }
    None
}
