//! Ground-truthed synthetic multi-session scenes.
//!
//! A query vehicle drives a smooth road-like path. Reference traversals of
//! the same road, laterally offset, are turned into per-session SfM and SLAM
//! maps by triangulating noisy keyframe observations. Query frames receive
//! 2D-3D matches against every map, tracked 2D-2D matches to the next frames
//! and drifting odometry. Every injected corruption is labeled.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, UnitSphere};
use rand_pcg::Pcg64;
use rayon::prelude::*;

use crate::consensus::TrackStore;
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, project, CameraIntrinsics, MatchSet2D2D, Point2, Point3, Pose};
use crate::localize::{mix_seed, Match2D3D, Source};
use crate::map_build::{build_map, MapBuildConfig, MapFrame, SessionMap, Track};

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub n_frames: usize,
    pub n_sessions: usize,
    /// Farthest lateral distance of scene points from the road, metres.
    pub scene_extent: f64,
    /// 2D-3D matches drawn per frame and session map.
    pub points_per_frame: usize,
    pub tracks_per_pair: usize,
    pub pixel_noise: f64,
    pub outlier_rate_2d3d: f64,
    pub outlier_rate_2d2d: f64,
    pub gross_outlier_rate: f64,
    pub gross_outlier_magnitude: f64,
    pub session_failure_rate: f64,
    /// Odometry translation noise, metres per metre travelled.
    pub drift_translation: f64,
    /// Odometry rotation noise, radians per metre travelled.
    pub drift_rotation: f64,
    pub speed: f64,
    /// Segments of ten frames driven at a crawl.
    pub slow_segments: usize,
    pub frame_dt: f64,
    pub max_depth: f64,
    /// Offset magnitude of the incompatible session's localizations, metres.
    pub incompatible_bias: f64,
    /// Match-count multiplier of the incompatible session.
    pub incompatible_boost: f64,
    /// Fraction of frames whose matches in every session are dominated by a
    /// structured set consistent with a displaced pose.
    pub contamination_rate: f64,
    pub contamination_offset: f64,
    /// Size of the structured set relative to the genuine matches.
    pub contamination_ratio: f64,
    pub intrinsics: CameraIntrinsics,
    pub map: MapBuildConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_frames: 1000,
            n_sessions: 3,
            scene_extent: 20.0,
            points_per_frame: 100,
            tracks_per_pair: 100,
            pixel_noise: 1.0,
            outlier_rate_2d3d: 0.3,
            outlier_rate_2d2d: 0.1,
            gross_outlier_rate: 0.1,
            gross_outlier_magnitude: 5.0,
            session_failure_rate: 0.05,
            drift_translation: 0.01,
            drift_rotation: 1e-4,
            speed: 1.0,
            slow_segments: 1,
            frame_dt: 0.1,
            max_depth: 40.0,
            incompatible_bias: 0.0,
            incompatible_boost: 3.0,
            contamination_rate: 0.0,
            contamination_offset: 2.0,
            contamination_ratio: 1.5,
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
                width: 640.0,
                height: 480.0,
            },
            map: MapBuildConfig::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// All noise sources and corruption rates set to zero.
    pub fn noiseless() -> Self {
        Self {
            pixel_noise: 0.0,
            outlier_rate_2d3d: 0.0,
            outlier_rate_2d2d: 0.0,
            gross_outlier_rate: 0.0,
            session_failure_rate: 0.0,
            drift_translation: 0.0,
            drift_rotation: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("outlier_rate_2d3d", self.outlier_rate_2d3d),
            ("outlier_rate_2d2d", self.outlier_rate_2d2d),
            ("gross_outlier_rate", self.gross_outlier_rate),
            ("session_failure_rate", self.session_failure_rate),
            ("contamination_rate", self.contamination_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} = {r} is not in [0, 1]")));
            }
        }
        if self.n_frames < 2 {
            return Err(Error::InvalidConfig("n_frames must be at least 2".into()));
        }
        if self.n_sessions < 1 {
            return Err(Error::InvalidConfig("n_sessions must be at least 1".into()));
        }
        let nonneg = [
            ("pixel_noise", self.pixel_noise),
            ("gross_outlier_magnitude", self.gross_outlier_magnitude),
            ("drift_translation", self.drift_translation),
            ("drift_rotation", self.drift_rotation),
            ("incompatible_bias", self.incompatible_bias),
            ("contamination_offset", self.contamination_offset),
            ("contamination_ratio", self.contamination_ratio),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(self.speed > 0.0 && self.frame_dt > 0.0 && self.max_depth > 1.0 && self.scene_extent > 4.0) {
            return Err(Error::InvalidConfig("speed, frame_dt, max_depth and scene_extent out of range".into()));
        }
        if self.incompatible_boost < 1.0 {
            return Err(Error::InvalidConfig("incompatible_boost must be at least 1".into()));
        }
        if self.points_per_frame < 4 || self.tracks_per_pair == 0 {
            return Err(Error::InvalidConfig("points_per_frame >= 4 and tracks_per_pair >= 1 required".into()));
        }
        self.intrinsics.validate()
    }
}

/// Query-side inputs of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    pub frame: usize,
    pub timestamp: f64,
    pub matches: Vec<Match2D3D>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<Pose>,
    pub timestamps: Vec<f64>,
    /// Frames whose matches all come from a displaced pose.
    pub aliased: BTreeSet<usize>,
    /// `(frame, session)` pairs whose matches were emptied of inliers.
    pub failed: BTreeSet<(usize, u32)>,
    /// `(frame, session)` pairs localized against a biased pose.
    pub biased: BTreeSet<(usize, u32)>,
    /// Frames carrying structured cross-session outliers.
    pub contaminated: BTreeSet<usize>,
    /// Indices into each frame's match list that are outliers.
    pub outlier_matches: BTreeMap<usize, Vec<usize>>,
    /// Indices into each track set that are outliers.
    pub outlier_tracks: BTreeMap<(usize, usize), Vec<usize>>,
}

impl GroundTruth {
    /// Frames whose every candidate is expected to be wrong.
    pub fn outlier_prior_frames(&self) -> BTreeSet<usize> {
        self.aliased.union(&self.contaminated).copied().collect()
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub maps: Vec<SessionMap>,
    pub frames: Vec<FrameData>,
    pub tracks: TrackStore,
    /// Relative poses `X_a⁻¹ X_b` between consecutive frames.
    pub odometry: BTreeMap<(usize, usize), Pose>,
    pub truth: GroundTruth,
}

struct World {
    points: Vec<Point3>,
}

fn yaw_pose(position: Point3, yaw: f64, wobble: Vector3<f64>) -> Pose {
    let r = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw) * exp_so3(&wobble);
    Pose::new(r, position)
}

/// Centreline samples `(position, yaw)` and the per-frame step lengths.
fn road(cfg: &ScenarioConfig, rng: &mut Pcg64) -> Vec<(Point3, f64)> {
    let n = cfg.n_frames;
    let mut slow = vec![false; n];
    for _ in 0..cfg.slow_segments {
        if n > 30 {
            let start = rng.random_range(10..n - 20);
            for s in slow.iter_mut().skip(start).take(10) {
                *s = true;
            }
        }
    }
    let curv_noise = Normal::new(0.0, 0.002).unwrap();
    let mut out = Vec::with_capacity(n);
    let (mut p, mut yaw, mut kappa) = (Point3::zeros(), 0.0f64, 0.0f64);
    for s in slow {
        out.push((p, yaw));
        let step = if s { 0.05 * cfg.speed } else { cfg.speed };
        kappa = (0.95 * kappa + curv_noise.sample(rng)).clamp(-0.02, 0.02);
        yaw += kappa * step;
        p += Vector3::new(yaw.sin(), 0.0, yaw.cos()) * step;
    }
    out
}

fn lateral(yaw: f64) -> Vector3<f64> {
    Vector3::new(yaw.cos(), 0.0, -yaw.sin())
}

fn scatter_world(cfg: &ScenarioConfig, centre: &[(Point3, f64)], rng: &mut Pcg64) -> World {
    // points every 0.25 m of road on each side, then beyond the end
    let mut points = Vec::new();
    let (last, last_yaw) = *centre.last().unwrap();
    let extra = (cfg.max_depth / cfg.speed).ceil() as usize + 1;
    let ahead = (0..extra).map(|i| (last + Vector3::new(last_yaw.sin(), 0.0, last_yaw.cos()) * (i as f64 * cfg.speed), last_yaw));
    let samples: Vec<(Point3, f64)> = centre.iter().copied().chain(ahead).collect();
    let mut travelled = 0.0;
    let mut prev = samples[0].0;
    for (p, yaw) in samples {
        travelled += (p - prev).norm();
        prev = p;
        while travelled > 0.0 {
            for side in [-1.0, 1.0] {
                let d = rng.random_range(4.0..cfg.scene_extent);
                let h = rng.random_range(-6.0..1.5);
                let along = rng.random_range(-0.5..0.5);
                points.push(p + lateral(yaw) * (side * d) + Vector3::new(yaw.sin(), 0.0, yaw.cos()) * along + Vector3::new(0.0, h, 0.0));
            }
            travelled -= 0.25;
        }
    }
    World { points }
}

fn visible(pose: &Pose, k: &CameraIntrinsics, x: &Point3, max_depth: f64) -> Option<Point2> {
    let depth = pose.inverse_transform_point(x).z;
    if !(1.0..=max_depth).contains(&depth) {
        return None;
    }
    project(pose, k, x).ok().filter(|u| k.contains(u))
}

/// Indices of world points close enough to `pose` to possibly be seen.
fn candidates_near(index: &[Vec<usize>], pose: &Pose, cell: f64) -> Vec<usize> {
    let cx = (pose.translation.x / cell).floor() as i64;
    let cz = (pose.translation.z / cell).floor() as i64;
    let mut out = Vec::new();
    let r = 2;
    for dx in -r..=r {
        for dz in -r..=r {
            if let Some(v) = index.get(cell_key(cx + dx, cz + dz, index.len())) {
                out.extend_from_slice(v);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn cell_key(x: i64, z: i64, buckets: usize) -> usize {
    let h = (x.wrapping_mul(73_856_093) ^ z.wrapping_mul(19_349_663)) as u64;
    (h % buckets as u64) as usize
}

struct Grid {
    cell: f64,
    buckets: Vec<Vec<usize>>,
}

impl Grid {
    fn new(points: &[Point3], cell: f64) -> Self {
        let mut buckets = vec![Vec::new(); (points.len() / 8).max(64)];
        let n = buckets.len();
        for (i, p) in points.iter().enumerate() {
            let key = cell_key((p.x / cell).floor() as i64, (p.z / cell).floor() as i64, n);
            buckets[key].push(i);
        }
        Self { cell, buckets }
    }

    fn visible(&self, world: &World, pose: &Pose, k: &CameraIntrinsics, max_depth: f64) -> Vec<(usize, Point2)> {
        candidates_near(&self.buckets, pose, self.cell)
            .into_iter()
            .filter_map(|i| visible(pose, k, &world.points[i], max_depth).map(|u| (i, u)))
            .collect()
    }
}

fn noise(rng: &mut Pcg64, sigma: f64) -> Point2 {
    if sigma == 0.0 {
        return Point2::zeros();
    }
    let n = Normal::new(0.0, sigma).unwrap();
    Point2::new(n.sample(rng), n.sample(rng))
}

fn random_pixel(rng: &mut Pcg64, k: &CameraIntrinsics) -> Point2 {
    Point2::new(rng.random_range(0.0..k.width), rng.random_range(0.0..k.height))
}

/// Triangulated SfM and SLAM maps of one reference traversal.
fn session_maps(
    cfg: &ScenarioConfig,
    session: u32,
    centre: &[(Point3, f64)],
    world: &World,
    grid: &Grid,
) -> Vec<SessionMap> {
    let k = cfg.intrinsics;
    let mut rng = Pcg64::seed_from_u64(mix_seed(cfg.seed, &[1, session as u64]));
    let offset = (session as f64 - (cfg.n_sessions as f64 - 1.0) / 2.0) * 1.5;
    // each condition sees its own subset of the scene
    let present: Vec<bool> = (0..world.points.len()).map(|_| rng.random_bool(0.8)).collect();
    let mut maps = Vec::new();
    for (source, spacing) in [(Source::Sfm, 4.0), (Source::Slam, 2.0)] {
        let mut frames = Vec::new();
        let mut since = f64::INFINITY;
        let mut prev = centre[0].0;
        for (i, (p, yaw)) in centre.iter().enumerate() {
            since += (p - prev).norm();
            prev = *p;
            if since >= spacing {
                since = 0.0;
                let pose = yaw_pose(p + lateral(*yaw) * offset, *yaw, Vector3::zeros());
                frames.push(MapFrame {
                    id: i,
                    timestamp: i as f64 * cfg.frame_dt,
                    pose,
                    intrinsics: k,
                });
            }
        }
        let mut obs: BTreeMap<usize, Vec<(usize, Point2)>> = BTreeMap::new();
        for f in &frames {
            for (i, u) in grid.visible(world, &f.pose, &k, cfg.max_depth) {
                if present[i] {
                    obs.entry(i).or_default().push((f.id, u + noise(&mut rng, cfg.pixel_noise)));
                }
            }
        }
        let tracks: Vec<Track> = obs
            .into_iter()
            .filter(|(_, o)| o.len() >= 2)
            .map(|(id, mut o)| {
                // at most six views, spread over the track
                if o.len() > 6 {
                    let step = (o.len() - 1) as f64 / 5.0;
                    o = (0..6).map(|j| o[(j as f64 * step).round() as usize]).collect();
                }
                Track { id: id as u64, observations: o }
            })
            .collect();
        maps.push(build_map(session, source, frames, &tracks, &cfg.map));
    }
    maps
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let k = cfg.intrinsics;
    let n = cfg.n_frames;
    let mut rng = Pcg64::seed_from_u64(mix_seed(cfg.seed, &[0]));
    let centre = road(cfg, &mut rng);
    let world = scatter_world(cfg, &centre, &mut rng);
    let grid = Grid::new(&world.points, cfg.max_depth);

    let wobble = Normal::new(0.0, 0.003).unwrap();
    let truth_poses: Vec<Pose> = centre
        .iter()
        .map(|(p, yaw)| {
            let w = if cfg.pixel_noise == 0.0 && cfg.drift_translation == 0.0 {
                Vector3::zeros()
            } else {
                Vector3::new(wobble.sample(&mut rng), wobble.sample(&mut rng), wobble.sample(&mut rng))
            };
            yaw_pose(*p, *yaw, w)
        })
        .collect();

    let maps: Vec<SessionMap> = (0..cfg.n_sessions as u32)
        .into_par_iter()
        .flat_map(|s| session_maps(cfg, s, &centre, &world, &grid))
        .collect();
    // world id -> map point position, per (session, source)
    let lookup: Vec<BTreeMap<u64, Point3>> = maps
        .iter()
        .map(|m| m.points.iter().map(|p| (p.id, p.position)).collect())
        .collect();

    let mut truth = GroundTruth {
        poses: truth_poses.clone(),
        timestamps: (0..n).map(|i| i as f64 * cfg.frame_dt).collect(),
        ..Default::default()
    };
    for f in 0..n {
        let mut r = Pcg64::seed_from_u64(mix_seed(cfg.seed, &[2, f as u64]));
        if r.random_bool(cfg.gross_outlier_rate) {
            truth.aliased.insert(f);
        } else if r.random_bool(cfg.contamination_rate) {
            truth.contaminated.insert(f);
        }
        for s in 0..cfg.n_sessions as u32 {
            if r.random_bool(cfg.session_failure_rate) {
                truth.failed.insert((f, s));
            } else if cfg.incompatible_bias > 0.0 && s == 0 {
                truth.biased.insert((f, s));
            }
        }
    }

    let per_frame: Vec<(FrameData, Vec<usize>)> = (0..n)
        .into_par_iter()
        .map(|f| frame_matches(cfg, f, &truth, &maps, &lookup, &world, &grid))
        .collect();
    let mut frames = Vec::with_capacity(n);
    for (fd, out) in per_frame {
        if !out.is_empty() {
            truth.outlier_matches.insert(fd.frame, out);
        }
        frames.push(fd);
    }

    let pairs: Vec<(usize, usize)> = (0..n - 1).map(|a| (a, a + 1)).chain((0..n.saturating_sub(2)).map(|a| (a, a + 2))).collect();
    let track_sets: Vec<((usize, usize), MatchSet2D2D, Vec<usize>)> = pairs
        .into_par_iter()
        .map(|(a, b)| {
            let mut r = Pcg64::seed_from_u64(mix_seed(cfg.seed, &[3, a as u64, b as u64]));
            let va: BTreeMap<usize, Point2> = grid.visible(&world, &truth_poses[a], &k, cfg.max_depth).into_iter().collect();
            let mut common: Vec<(Point2, Point2)> = grid
                .visible(&world, &truth_poses[b], &k, cfg.max_depth)
                .into_iter()
                .filter_map(|(i, ub)| va.get(&i).map(|ua| (*ua, ub)))
                .collect();
            common.shuffle(&mut r);
            common.truncate(cfg.tracks_per_pair);
            let mut set = MatchSet2D2D::new(a, b);
            let mut outliers = Vec::new();
            for (i, (ua, ub)) in common.into_iter().enumerate() {
                let ua = ua + noise(&mut r, cfg.pixel_noise);
                let ub = if r.random_bool(cfg.outlier_rate_2d2d) {
                    outliers.push(i);
                    random_pixel(&mut r, &k)
                } else {
                    ub + noise(&mut r, cfg.pixel_noise)
                };
                set.pairs.push((ua, ub));
            }
            ((a, b), set, outliers)
        })
        .collect();
    let mut tracks = TrackStore::new();
    for (key, set, out) in track_sets {
        if !out.is_empty() {
            truth.outlier_tracks.insert(key, out);
        }
        tracks.insert(key, set);
    }

    let mut odometry = BTreeMap::new();
    let mut r = Pcg64::seed_from_u64(mix_seed(cfg.seed, &[4]));
    let gauss = Normal::new(0.0, 1.0).unwrap();
    for a in 0..n - 1 {
        let rel = truth_poses[a].inverse().compose(&truth_poses[a + 1]);
        let dist = rel.translation.norm();
        let mut draw = |s: f64| if s == 0.0 { 0.0 } else { s * gauss.sample(&mut r) };
        let st = cfg.drift_translation * dist;
        let sr = cfg.drift_rotation * dist;
        let dt = Vector3::new(draw(st), draw(st), draw(st));
        let dw = Vector3::new(draw(sr), draw(sr), draw(sr));
        let z = Pose::new(rel.rotation * exp_so3(&dw), rel.translation + dt);
        odometry.insert((a, a + 1), z);
    }

    Ok(Scenario {
        config: cfg.clone(),
        maps,
        frames,
        tracks,
        odometry,
        truth,
    })
}

#[allow(clippy::too_many_arguments)]
fn frame_matches(
    cfg: &ScenarioConfig,
    f: usize,
    truth: &GroundTruth,
    maps: &[SessionMap],
    lookup: &[BTreeMap<u64, Point3>],
    world: &World,
    grid: &Grid,
) -> (FrameData, Vec<usize>) {
    let k = cfg.intrinsics;
    let mut rng = Pcg64::seed_from_u64(mix_seed(cfg.seed, &[5, f as u64]));
    let true_pose = truth.poses[f];
    let displaced = |offset: Vector3<f64>| Pose::new(true_pose.rotation, true_pose.translation + true_pose.rotation * offset);
    let gen_pose = if truth.aliased.contains(&f) {
        displaced(Vector3::new(cfg.gross_outlier_magnitude, 0.0, 0.0))
    } else {
        true_pose
    };
    let bias_dir: Vector3<f64> = Vector3::from(UnitSphere.sample(&mut rng));
    let contamination_pose = displaced(Vector3::new(cfg.contamination_offset, 0.0, 0.0));

    // one pixel per feature, shared by every map that knows the point
    let mut pixel_noise: BTreeMap<usize, Point2> = BTreeMap::new();
    let mut matches = Vec::new();
    let mut outliers = Vec::new();
    for s in 0..cfg.n_sessions as u32 {
        let biased = truth.biased.contains(&(f, s));
        let pose = if biased {
            Pose::new(gen_pose.rotation, gen_pose.translation + bias_dir * cfg.incompatible_bias)
        } else {
            gen_pose
        };
        let count = if biased {
            (cfg.points_per_frame as f64 * cfg.incompatible_boost).round() as usize
        } else {
            cfg.points_per_frame
        };
        let mut vis = grid.visible(world, &pose, &k, cfg.max_depth);
        vis.shuffle(&mut rng);
        let failed = truth.failed.contains(&(f, s));
        for (mi, map) in maps.iter().enumerate().filter(|(_, m)| m.session_id == s) {
            let known: Vec<&(usize, Point2)> = vis.iter().filter(|(i, _)| lookup[mi].contains_key(&(*i as u64))).take(count).collect();
            for (i, u) in &known {
                let nz = *pixel_noise.entry(*i).or_insert_with(|| noise(&mut rng, cfg.pixel_noise));
                let genuine = lookup[mi][&(*i as u64)];
                let corrupt = failed || rng.random_bool(cfg.outlier_rate_2d3d);
                let world_pt = if corrupt {
                    outliers.push(matches.len());
                    map.points[rng.random_range(0..map.points.len())].position
                } else {
                    genuine
                };
                matches.push(Match2D3D {
                    query: u + nz,
                    world: world_pt,
                    source: map.source,
                    session: s,
                });
            }
            if truth.contaminated.contains(&f) && !failed {
                let extra = (known.len() as f64 * cfg.contamination_ratio).round() as usize;
                let mut cvis = grid.visible(world, &contamination_pose, &k, cfg.max_depth);
                cvis.shuffle(&mut rng);
                for (i, u) in cvis.into_iter().filter(|(i, _)| lookup[mi].contains_key(&(*i as u64))).take(extra) {
                    outliers.push(matches.len());
                    matches.push(Match2D3D {
                        query: u + noise(&mut rng, cfg.pixel_noise),
                        world: lookup[mi][&(i as u64)],
                        source: map.source,
                        session: s,
                    });
                }
            }
        }
    }
    (
        FrameData {
            frame: f,
            timestamp: truth.timestamps[f],
            matches,
        },
        outliers,
    )
}

/// As [`generate`], with session 0 localized against a pose offset by
/// `bias` metres in a random direction at every frame and its match count
/// boosted so that it dominates a pooled RANSAC.
pub fn scenario_incompatible_sessions(cfg: &ScenarioConfig, bias: f64) -> Result<Scenario> {
    generate(&ScenarioConfig {
        incompatible_bias: bias,
        ..cfg.clone()
    })
}

/// As [`generate`], with a fraction of frames carrying a structured outlier
/// set in every session that outvotes the genuine matches.
pub fn scenario_contaminated(cfg: &ScenarioConfig, rate: f64) -> Result<Scenario> {
    generate(&ScenarioConfig {
        contamination_rate: rate,
        ..cfg.clone()
    })
}
