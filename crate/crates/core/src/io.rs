//! Line-oriented text formats. Every float is written with 17 significant
//! digits so that a write/read cycle is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::{FromStr, SplitWhitespace};

use crate::consensus::{Fusion, TrackStore};
use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::geometry::{CameraIntrinsics, MatchSet2D2D, Point2, Point3, Pose};
use crate::localize::{Candidate, CandidateSet, Match2D3D, Source};
use crate::map_build::{MapFrame, MapPoint, SessionMap};
use crate::refine::{LogEntry, RefinementState};
use crate::simulator::GroundTruth;

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_floats(out: &mut String, xs: &[f64]) {
    for x in xs {
        out.push(' ');
        out.push_str(&fmt_f64(*x));
    }
}

fn push_pose(out: &mut String, p: &Pose) {
    let t = p.translation;
    push_floats(out, &[t.x, t.y, t.z]);
    push_floats(out, &p.quaternion_xyzw());
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Creates missing parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Tokens of one non-blank, non-comment line.
pub struct Record<'a> {
    path: &'a Path,
    pub line: usize,
    tokens: SplitWhitespace<'a>,
}

impl<'a> Record<'a> {
    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    pub fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.tokens.next().ok_or_else(|| self.err(format!("missing {what}")))?;
        tok.parse().map_err(|_| self.err(format!("bad {what} `{tok}`")))
    }

    pub fn rest(&mut self) -> Option<&'a str> {
        self.tokens.next()
    }

    fn floats<const N: usize>(&mut self, what: &str) -> Result<[f64; N]> {
        let mut out = [0.0f64; N];
        for v in &mut out {
            *v = self.next(what)?;
            if !v.is_finite() {
                return Err(self.err(format!("non-finite {what}")));
            }
        }
        Ok(out)
    }

    fn pose(&mut self) -> Result<Pose> {
        let t = self.floats::<3>("translation")?;
        let q = self.floats::<4>("quaternion")?;
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(self.err(format!("quaternion norm {n} is not 1")));
        }
        Ok(Pose::from_xyzw(t, q))
    }

    fn point2(&mut self) -> Result<Point2> {
        let [u, v] = self.floats::<2>("pixel")?;
        Ok(Point2::new(u, v))
    }

    fn point3(&mut self) -> Result<Point3> {
        let [x, y, z] = self.floats::<3>("point")?;
        Ok(Point3::new(x, y, z))
    }

    pub fn finish(mut self) -> Result<()> {
        match self.tokens.next() {
            Some(t) => Err(self.err(format!("unexpected trailing token `{t}`"))),
            None => Ok(()),
        }
    }
}

/// Splits `text` into records, skipping blank lines and `#` comments.
pub fn records<'a>(path: &'a Path, text: &'a str) -> impl Iterator<Item = Record<'a>> {
    text.lines().enumerate().filter_map(move |(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| Record {
            path,
            line: i + 1,
            tokens: l.split_whitespace(),
        })
    })
}

fn expect_tag(r: &mut Record, tag: &str) -> Result<()> {
    let t: String = r.next("record tag")?;
    if t == tag {
        Ok(())
    } else {
        Err(r.err(format!("expected `{tag}`, found `{t}`")))
    }
}

/// Reads a file and parses it; parse errors carry the path and line.
pub fn load<T>(path: &Path, parse: impl FnOnce(&Path, &str) -> Result<T>) -> Result<T> {
    parse(path, &read_text(path)?)
}

// trajectory: `timestamp tx ty tz qx qy qz qw`

pub fn format_trajectory(t: &[(f64, Pose)]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (ts, p) in t {
        out.push_str(&fmt_f64(*ts));
        push_pose(&mut out, p);
        out.push('\n');
    }
    out
}

pub fn parse_trajectory(path: &Path, text: &str) -> Result<Trajectory> {
    records(path, text)
        .map(|mut r| {
            let ts: f64 = r.next("timestamp")?;
            let p = r.pose()?;
            r.finish()?;
            Ok((ts, p))
        })
        .collect()
}

// odometry: `frame_a frame_b tx ty tz qx qy qz qw`

pub fn format_odometry(odo: &BTreeMap<(usize, usize), Pose>) -> String {
    let mut out = String::from("# frame_a frame_b tx ty tz qx qy qz qw\n");
    for ((a, b), p) in odo {
        write!(out, "{a} {b}").unwrap();
        push_pose(&mut out, p);
        out.push('\n');
    }
    out
}

pub fn parse_odometry(path: &Path, text: &str) -> Result<BTreeMap<(usize, usize), Pose>> {
    let mut odo = BTreeMap::new();
    for mut r in records(path, text) {
        let a: usize = r.next("frame_a")?;
        let b: usize = r.next("frame_b")?;
        let p = r.pose()?;
        let line = r.line;
        r.finish()?;
        if odo.insert((a, b), p).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("duplicate odometry {a} {b}"),
            });
        }
    }
    Ok(odo)
}

// tracks: `frame_a frame_b u1 v1 u2 v2`

pub fn format_tracks(tracks: &TrackStore) -> String {
    let mut out = String::from("# frame_a frame_b u1 v1 u2 v2\n");
    for ((a, b), set) in tracks {
        for (p, q) in &set.pairs {
            write!(out, "{a} {b}").unwrap();
            push_floats(&mut out, &[p.x, p.y, q.x, q.y]);
            out.push('\n');
        }
    }
    out
}

pub fn parse_tracks(path: &Path, text: &str) -> Result<TrackStore> {
    let mut tracks = TrackStore::new();
    for mut r in records(path, text) {
        let a: usize = r.next("frame_a")?;
        let b: usize = r.next("frame_b")?;
        let p = r.point2()?;
        let q = r.point2()?;
        r.finish()?;
        tracks
            .entry((a, b))
            .or_insert_with(|| MatchSet2D2D::new(a, b))
            .pairs
            .push((p, q));
    }
    Ok(tracks)
}

/// Frame ids with timestamps, plus per-frame 2D-3D matches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryFile {
    pub frames: Vec<(usize, f64)>,
    pub matches: BTreeMap<usize, Vec<Match2D3D>>,
}

// query: `FRAME id ts`, then `Q session source u v X Y Z`

pub fn format_queries(q: &QueryFile) -> String {
    let mut out = String::from("# FRAME id ts\n# Q session source u v X Y Z\n");
    for (f, ts) in &q.frames {
        writeln!(out, "FRAME {f} {}", fmt_f64(*ts)).unwrap();
        for m in q.matches.get(f).into_iter().flatten() {
            write!(out, "Q {} {}", m.session, m.source).unwrap();
            push_floats(&mut out, &[m.query.x, m.query.y, m.world.x, m.world.y, m.world.z]);
            out.push('\n');
        }
    }
    out
}

fn frame_header(r: &mut Record, frames: &mut Vec<(usize, f64)>) -> Result<()> {
    let f: usize = r.next("frame id")?;
    let ts: f64 = r.next("timestamp")?;
    if frames.last().is_some_and(|(last, _)| *last >= f) {
        return Err(r.err(format!("frame {f} out of order")));
    }
    frames.push((f, ts));
    Ok(())
}

pub fn parse_queries(path: &Path, text: &str) -> Result<QueryFile> {
    let mut q = QueryFile::default();
    for mut r in records(path, text) {
        let tag: String = r.next("record tag")?;
        match tag.as_str() {
            "FRAME" => {
                frame_header(&mut r, &mut q.frames)?;
                q.matches.insert(q.frames.last().unwrap().0, Vec::new());
            }
            "Q" => {
                let Some(&(f, _)) = q.frames.last() else {
                    return Err(r.err("match before any FRAME"));
                };
                let session: u32 = r.next("session")?;
                let source: Source = r.next("source")?;
                let query = r.point2()?;
                let world = r.point3()?;
                q.matches.get_mut(&f).unwrap().push(Match2D3D {
                    query,
                    world,
                    source,
                    session,
                });
            }
            other => return Err(r.err(format!("unknown record `{other}`"))),
        }
        r.finish()?;
    }
    Ok(q)
}

/// Candidate sets with the timestamp of each frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateFile {
    pub frames: Vec<(usize, f64)>,
    pub sets: Vec<CandidateSet>,
}

// candidates: `FRAME id ts`, `CAND frame session tx ty tz qx qy qz qw n`,
// then n lines `M2D3D u v X Y Z source`

pub fn format_candidates(frames: &[(usize, f64)], sets: &[CandidateSet]) -> String {
    let by_frame: BTreeMap<usize, &CandidateSet> = sets.iter().map(|s| (s.frame, s)).collect();
    let mut out = String::from("# FRAME id ts\n# CAND frame session tx ty tz qx qy qz qw n_inliers\n# M2D3D u v X Y Z source\n");
    for (f, ts) in frames {
        writeln!(out, "FRAME {f} {}", fmt_f64(*ts)).unwrap();
        for c in by_frame.get(f).map(|s| s.candidates.as_slice()).unwrap_or(&[]) {
            write!(out, "CAND {f} {}", c.session).unwrap();
            push_pose(&mut out, &c.pose);
            writeln!(out, " {}", c.inliers.len()).unwrap();
            for m in &c.inliers {
                out.push_str("M2D3D");
                push_floats(&mut out, &[m.query.x, m.query.y, m.world.x, m.world.y, m.world.z]);
                writeln!(out, " {}", m.source).unwrap();
            }
        }
    }
    out
}

pub fn parse_candidates(path: &Path, text: &str) -> Result<CandidateFile> {
    let mut frames: Vec<(usize, f64)> = Vec::new();
    let mut per_frame: Vec<Vec<Candidate>> = Vec::new();
    // matches still owed to the last candidate
    let mut pending = 0usize;
    let mut last_line = 0;
    for mut r in records(path, text) {
        last_line = r.line;
        let tag: String = r.next("record tag")?;
        match tag.as_str() {
            "M2D3D" => {
                if pending == 0 {
                    return Err(r.err("M2D3D without an open CAND record"));
                }
                let query = r.point2()?;
                let world = r.point3()?;
                let cand = per_frame.last_mut().unwrap().last_mut().unwrap();
                let source = match r.rest() {
                    Some(s) => s.parse().map_err(|e: String| r.err(e))?,
                    None => Source::Sim,
                };
                cand.inliers.push(Match2D3D {
                    query,
                    world,
                    source,
                    session: cand.session,
                });
                pending -= 1;
            }
            _ if pending > 0 => return Err(r.err(format!("{pending} M2D3D lines missing before `{tag}`"))),
            "FRAME" => {
                frame_header(&mut r, &mut frames)?;
                per_frame.push(Vec::new());
            }
            "CAND" => {
                let f: usize = r.next("frame id")?;
                if frames.last().map(|(id, _)| *id) != Some(f) {
                    return Err(r.err(format!("CAND for frame {f} outside its FRAME block")));
                }
                let session: u32 = r.next("session")?;
                let pose = r.pose()?;
                pending = r.next("n_inliers")?;
                let list = per_frame.last_mut().unwrap();
                if list.iter().any(|c| c.session == session) {
                    return Err(r.err(format!("duplicate candidate for session {session}")));
                }
                list.push(Candidate {
                    session,
                    pose,
                    inliers: Vec::with_capacity(pending),
                });
            }
            other => return Err(r.err(format!("unknown record `{other}`"))),
        }
        r.finish()?;
    }
    if pending > 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: last_line,
            msg: format!("file ends with {pending} M2D3D lines missing"),
        });
    }
    let sets = frames
        .iter()
        .zip(per_frame)
        .map(|((f, _), c)| CandidateSet::new(*f, c))
        .collect();
    Ok(CandidateFile { frames, sets })
}

// selection: `SEL frame session score`, session `-` when the frame has none

pub fn format_selection(fusion: &Fusion) -> String {
    let mut out = String::from("# SEL frame_id session_id score\n");
    writeln!(out, "# total {}", fusion.selection.total).unwrap();
    for (f, session, score) in fusion.frame_scores() {
        match session {
            Some(s) => writeln!(out, "SEL {f} {s} {score}").unwrap(),
            None => writeln!(out, "SEL {f} - 0").unwrap(),
        }
    }
    out
}

/// `(frame, chosen session)` in file order.
pub fn parse_selection(path: &Path, text: &str) -> Result<Vec<(usize, Option<u32>)>> {
    records(path, text)
        .map(|mut r| {
            expect_tag(&mut r, "SEL")?;
            let f: usize = r.next("frame id")?;
            let s: String = r.next("session")?;
            let session = if s == "-" {
                None
            } else {
                Some(s.parse().map_err(|_| r.err(format!("bad session `{s}`")))?)
            };
            let _score: u64 = r.next("score")?;
            r.finish()?;
            Ok((f, session))
        })
        .collect()
}

/// Chosen candidate per frame from a selection and the candidate sets it
/// was computed on.
pub fn chosen_from_selection(
    path: &Path,
    selection: &[(usize, Option<u32>)],
    sets: &[CandidateSet],
) -> Result<Vec<(usize, Option<Candidate>)>> {
    let by_frame: BTreeMap<usize, &CandidateSet> = sets.iter().map(|s| (s.frame, s)).collect();
    selection
        .iter()
        .enumerate()
        .map(|(i, (f, s))| {
            let Some(s) = s else { return Ok((*f, None)) };
            by_frame
                .get(f)
                .and_then(|set| set.candidates.iter().find(|c| c.session == *s))
                .map(|c| (*f, Some(c.clone())))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("frame {f} has no candidate for session {s}"),
                })
        })
        .collect()
}

// weights: `W frame w`, frames without a prior are left out

pub fn format_weights(frames: &[usize], state: &RefinementState) -> String {
    let mut out = String::from("# W frame_id w\n");
    for (f, w) in frames.iter().zip(&state.weights) {
        if let Some(w) = w {
            writeln!(out, "W {f} {}", fmt_f64(*w)).unwrap();
        }
    }
    out
}

pub fn parse_weights(path: &Path, text: &str) -> Result<Vec<(usize, f64)>> {
    records(path, text)
        .map(|mut r| {
            expect_tag(&mut r, "W")?;
            let f: usize = r.next("frame id")?;
            let w: f64 = r.next("weight")?;
            r.finish()?;
            Ok((f, w))
        })
        .collect()
}

/// Iteration log as CSV. `runtime_ms` is wall-clock and the only column
/// that differs between reruns.
pub fn format_log(log: &[LogEntry]) -> String {
    let mut out = String::from("iter,step,objective,max_dw,runtime_ms\n");
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{:.3}",
            e.iter,
            e.step,
            fmt_f64(e.objective),
            fmt_f64(e.max_dw),
            e.runtime_ms
        )
        .unwrap();
    }
    out
}

// session map: `MAP session source prune_px fx fy cx cy width height`, then
// `FRAME id ts tx ty tz qx qy qz qw` and `POINT id X Y Z nobs (frame u v)*`

pub fn format_map(map: &SessionMap) -> String {
    let mut out = String::new();
    let k = map.frames.first().map(|f| f.intrinsics).unwrap_or_else(CameraIntrinsics::normalized);
    write!(out, "MAP {} {}", map.session_id, map.source).unwrap();
    push_floats(&mut out, &[map.prune_threshold_px, k.fx, k.fy, k.cx, k.cy, k.width, k.height]);
    out.push('\n');
    for f in &map.frames {
        write!(out, "FRAME {} {}", f.id, fmt_f64(f.timestamp)).unwrap();
        push_pose(&mut out, &f.pose);
        out.push('\n');
    }
    for p in &map.points {
        write!(out, "POINT {}", p.id).unwrap();
        push_floats(&mut out, &[p.position.x, p.position.y, p.position.z]);
        write!(out, " {}", p.observations.len()).unwrap();
        for (f, uv) in &p.observations {
            write!(out, " {f}").unwrap();
            push_floats(&mut out, &[uv.x, uv.y]);
        }
        out.push('\n');
    }
    out
}

pub fn parse_map(path: &Path, text: &str) -> Result<SessionMap> {
    let mut recs = records(path, text);
    let mut head = recs.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty map file".into(),
    })?;
    expect_tag(&mut head, "MAP")?;
    let session_id: u32 = head.next("session")?;
    let source: Source = head.next("source")?;
    let [prune, fx, fy, cx, cy, w, h] = head.floats::<7>("map header value")?;
    let k = CameraIntrinsics::new(fx, fy, cx, cy, w, h).map_err(|e| head.err(e.to_string()))?;
    head.finish()?;
    let mut map = SessionMap {
        session_id,
        source,
        frames: Vec::new(),
        points: Vec::new(),
        prune_threshold_px: prune,
    };
    for mut r in recs {
        let tag: String = r.next("record tag")?;
        match tag.as_str() {
            "FRAME" => {
                let id: usize = r.next("frame id")?;
                let timestamp: f64 = r.next("timestamp")?;
                let pose = r.pose()?;
                if map.frames.last().is_some_and(|f| f.id >= id) {
                    return Err(r.err(format!("frame {id} out of order")));
                }
                map.frames.push(MapFrame {
                    id,
                    timestamp,
                    pose,
                    intrinsics: k,
                });
            }
            "POINT" => {
                let id: u64 = r.next("point id")?;
                let position = r.point3()?;
                let n: usize = r.next("observation count")?;
                let mut observations = Vec::with_capacity(n);
                for _ in 0..n {
                    let f: usize = r.next("observation frame")?;
                    if map.frame(f).is_none() {
                        return Err(r.err(format!("observation references unknown frame {f}")));
                    }
                    observations.push((f, r.point2()?));
                }
                map.points.push(MapPoint {
                    id,
                    position,
                    observations,
                });
            }
            other => return Err(r.err(format!("unknown record `{other}`"))),
        }
        r.finish()?;
    }
    Ok(map)
}

// labels: one record per injected corruption

pub fn format_labels(t: &GroundTruth) -> String {
    let mut out = String::from("# ALIASED frame | CONTAMINATED frame | FAILED frame session | BIASED frame session\n# OUTLIER_MATCH frame index | OUTLIER_TRACK frame_a frame_b index\n");
    for f in &t.aliased {
        writeln!(out, "ALIASED {f}").unwrap();
    }
    for f in &t.contaminated {
        writeln!(out, "CONTAMINATED {f}").unwrap();
    }
    for (f, s) in &t.failed {
        writeln!(out, "FAILED {f} {s}").unwrap();
    }
    for (f, s) in &t.biased {
        writeln!(out, "BIASED {f} {s}").unwrap();
    }
    for (f, idx) in &t.outlier_matches {
        for i in idx {
            writeln!(out, "OUTLIER_MATCH {f} {i}").unwrap();
        }
    }
    for ((a, b), idx) in &t.outlier_tracks {
        for i in idx {
            writeln!(out, "OUTLIER_TRACK {a} {b} {i}").unwrap();
        }
    }
    out
}

/// Labels only; poses and timestamps come from the trajectory file.
pub fn parse_labels(path: &Path, text: &str) -> Result<GroundTruth> {
    let mut t = GroundTruth::default();
    for mut r in records(path, text) {
        let tag: String = r.next("record tag")?;
        match tag.as_str() {
            "ALIASED" => {
                t.aliased.insert(r.next("frame")?);
            }
            "CONTAMINATED" => {
                t.contaminated.insert(r.next("frame")?);
            }
            "FAILED" => {
                t.failed.insert((r.next("frame")?, r.next("session")?));
            }
            "BIASED" => {
                t.biased.insert((r.next("frame")?, r.next("session")?));
            }
            "OUTLIER_MATCH" => {
                let f = r.next("frame")?;
                t.outlier_matches.entry(f).or_default().push(r.next("index")?);
            }
            "OUTLIER_TRACK" => {
                let key = (r.next("frame_a")?, r.next("frame_b")?);
                t.outlier_tracks.entry(key).or_default().push(r.next("index")?);
            }
            other => return Err(r.err(format!("unknown record `{other}`"))),
        }
        r.finish()?;
    }
    Ok(t)
}

/// One-line machine-readable error record.
pub fn error_record(e: &Error) -> String {
    let mut out = format!("error kind={}", e.kind());
    let (file, line): (Option<&PathBuf>, Option<usize>) = match e {
        Error::Parse { path, line, .. } => (Some(path), Some(*line)),
        Error::Io { path, .. } => (Some(path), None),
        _ => (None, None),
    };
    if let Some(p) = file {
        write!(out, " file={:?}", p.display().to_string()).unwrap();
    }
    if let Some(l) = line {
        write!(out, " line={l}").unwrap();
    }
    let msg = match e {
        Error::Parse { msg, .. } => msg.clone(),
        Error::Io { source, .. } => source.to_string(),
        other => other.to_string(),
    };
    write!(out, " message={msg:?}").unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, pose_distance};
    use crate::simulator::{generate, ScenarioConfig};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.txt")
    }

    fn close(a: &Pose, b: &Pose) -> bool {
        let (r, t) = pose_distance(a, b);
        r < 1e-12 && t < 1e-12
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }

        #[test]
        fn trajectory_round_trip(ts in proptest::collection::vec(-1e6f64..1e6, 1..20), w in -3.0f64..3.0, t in -1e3f64..1e3) {
            let traj: Trajectory = ts.iter().map(|s| (*s, Pose::new(exp_so3(&Vector3::new(w, -w / 2.0, 0.3)), Vector3::new(t, -t, *s)))).collect();
            let back = parse_trajectory(p(), &format_trajectory(&traj)).unwrap();
            prop_assert_eq!(back.len(), traj.len());
            for ((a, pa), (b, pb)) in traj.iter().zip(&back) {
                prop_assert_eq!(a, b);
                prop_assert!(close(pa, pb));
            }
        }
    }

    #[test]
    fn scenario_files_round_trip() {
        let sc = generate(&ScenarioConfig { n_frames: 40, ..Default::default() }).unwrap();
        assert_eq!(parse_odometry(p(), &format_odometry(&sc.odometry)).unwrap().len(), sc.odometry.len());
        for (k, v) in parse_odometry(p(), &format_odometry(&sc.odometry)).unwrap() {
            assert!(close(&v, &sc.odometry[&k]));
        }
        assert_eq!(parse_tracks(p(), &format_tracks(&sc.tracks)).unwrap(), sc.tracks);
        let q = QueryFile {
            frames: sc.frames.iter().map(|f| (f.frame, f.timestamp)).collect(),
            matches: sc.frames.iter().map(|f| (f.frame, f.matches.clone())).collect(),
        };
        assert_eq!(parse_queries(p(), &format_queries(&q)).unwrap(), q);
        for m in &sc.maps {
            let back = parse_map(p(), &format_map(m)).unwrap();
            assert_eq!(back.points, m.points);
            assert_eq!(back.frames.len(), m.frames.len());
            for (a, b) in back.frames.iter().zip(&m.frames) {
                assert!(close(&a.pose, &b.pose));
                assert_eq!((a.id, a.timestamp, a.intrinsics), (b.id, b.timestamp, b.intrinsics));
            }
        }
        let labels = parse_labels(p(), &format_labels(&sc.truth)).unwrap();
        assert_eq!(labels.aliased, sc.truth.aliased);
        assert_eq!(labels.failed, sc.truth.failed);
        assert_eq!(labels.outlier_matches, sc.truth.outlier_matches);
        assert_eq!(labels.outlier_tracks, sc.truth.outlier_tracks);
    }

    #[test]
    fn candidates_round_trip() {
        let sc = generate(&ScenarioConfig { n_frames: 20, ..Default::default() }).unwrap();
        let inputs = crate::pipeline::Inputs::from_scenario(&sc);
        let sets = crate::pipeline::localize_all(&inputs, &Default::default());
        let text = format_candidates(&inputs.frames, &sets);
        let back = parse_candidates(p(), &text).unwrap();
        assert_eq!(back.frames, inputs.frames);
        assert_eq!(back.sets.len(), sets.len());
        for (a, b) in back.sets.iter().zip(&sets) {
            assert_eq!(a.frame, b.frame);
            assert_eq!(a.candidates.len(), b.candidates.len());
            for (ca, cb) in a.candidates.iter().zip(&b.candidates) {
                assert_eq!(ca.session, cb.session);
                assert!(close(&ca.pose, &cb.pose));
                assert_eq!(ca.inliers, cb.inliers);
            }
        }
        assert_eq!(format_candidates(&back.frames, &back.sets), text);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let text = "FRAME 0 0.0\nCAND 0 1 0 0 0 0 0 0 1 1\nM2D3D 1 2 3 4 five\n";
        match parse_candidates(p(), text) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, p());
            }
            other => panic!("{other:?}"),
        }
        let missing = "FRAME 0 0.0\nCAND 0 1 0 0 0 0 0 0 1 2\nM2D3D 1 2 3 4 5\nFRAME 1 0.1\n";
        assert!(matches!(parse_candidates(p(), missing), Err(Error::Parse { line: 4, .. })));
        assert!(matches!(parse_trajectory(p(), "# c\n\n0 1 2 3 0 0 0 2\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_odometry(p(), "0 1 0 0 0 0 0 0 1 extra\n"), Err(Error::Parse { line: 1, .. })));
        let rec = error_record(&parse_tracks(p(), "0 1 1 2 3\n").unwrap_err());
        assert!(rec.starts_with("error kind=parse file=\"mem.txt\" line=1"), "{rec}");
    }

    #[test]
    fn selection_and_weights_round_trip() {
        let w = parse_weights(p(), &format_weights(&[3, 4, 5], &RefinementState {
            poses: vec![Pose::identity(); 3],
            weights: vec![Some(0.25), None, Some(1.0)],
            iteration: 0,
        }))
        .unwrap();
        assert_eq!(w, vec![(3, 0.25), (5, 1.0)]);
        let sel = parse_selection(p(), "# total 7\nSEL 0 2 0\nSEL 1 - 0\nSEL 2 0 7\n").unwrap();
        assert_eq!(sel, vec![(0, Some(2)), (1, None), (2, Some(0))]);
        assert!(chosen_from_selection(p(), &sel, &[]).is_err());
    }
}
