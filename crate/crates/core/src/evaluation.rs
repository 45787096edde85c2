//! Trajectory scoring: recall at translation thresholds, ATE and timing.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::geometry::{pose_distance, Point3, Pose};
use crate::pnp::absolute_orientation;

pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.05, 0.1, 0.2, 0.5, 1.0, 3.0];

/// Timestamped poses.
pub type Trajectory = Vec<(f64, Pose)>;

/// Timestamps are compared at microsecond resolution.
pub fn time_key(ts: f64) -> i64 {
    (ts * 1e6).round() as i64
}

fn keyed(t: &[(f64, Pose)]) -> BTreeMap<i64, Pose> {
    t.iter().map(|(ts, p)| (time_key(*ts), *p)).collect()
}

/// Translation error of every reference frame; `None` where the estimate
/// has no pose.
pub fn translation_errors(estimated: &[(f64, Pose)], truth: &[(f64, Pose)]) -> Result<Vec<Option<f64>>> {
    errors_by(estimated, truth, |e, g| (e.translation - g.translation).norm())
}

/// Rotation error of every reference frame in degrees.
pub fn rotation_errors(estimated: &[(f64, Pose)], truth: &[(f64, Pose)]) -> Result<Vec<Option<f64>>> {
    errors_by(estimated, truth, |e, g| pose_distance(e, g).0.to_degrees())
}

fn errors_by(estimated: &[(f64, Pose)], truth: &[(f64, Pose)], err: impl Fn(&Pose, &Pose) -> f64) -> Result<Vec<Option<f64>>> {
    let est = keyed(estimated);
    let errs: Vec<Option<f64>> = truth
        .iter()
        .map(|(ts, g)| est.get(&time_key(*ts)).map(|e| err(e, g)))
        .collect();
    if errs.iter().all(Option::is_none) {
        return Err(Error::NoOverlap);
    }
    Ok(errs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable {
    pub thresholds: Vec<f64>,
    /// Fraction of reference frames within each threshold.
    pub recall: Vec<f64>,
    pub frames: usize,
}

impl RecallTable {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-12)
            .map(|i| self.recall[i])
    }
}

/// Frames missing from the estimate count as failures.
pub fn recall_table(estimated: &[(f64, Pose)], truth: &[(f64, Pose)], thresholds: &[f64]) -> Result<RecallTable> {
    Ok(table(&translation_errors(estimated, truth)?, thresholds))
}

/// Same as [`recall_table`] on rotation error, thresholds in degrees.
pub fn rotation_recall_table(estimated: &[(f64, Pose)], truth: &[(f64, Pose)], thresholds_deg: &[f64]) -> Result<RecallTable> {
    Ok(table(&rotation_errors(estimated, truth)?, thresholds_deg))
}

fn table(errs: &[Option<f64>], thresholds: &[f64]) -> RecallTable {
    let n = errs.len();
    let recall = thresholds
        .iter()
        .map(|t| errs.iter().filter(|e| matches!(e, Some(e) if e <= t)).count() as f64 / n as f64)
        .collect();
    RecallTable {
        thresholds: thresholds.to_vec(),
        recall,
        frames: n,
    }
}

/// RMSE of translation errors over frames present in both trajectories,
/// optionally after the best rigid alignment of the estimate onto the truth.
pub fn ate_rmse(estimated: &[(f64, Pose)], truth: &[(f64, Pose)], aligned: bool) -> Result<f64> {
    let est = keyed(estimated);
    let pairs: Vec<(Point3, Point3)> = truth
        .iter()
        .filter_map(|(ts, g)| est.get(&time_key(*ts)).map(|e| (e.translation, g.translation)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    let align = if aligned && pairs.len() >= 3 {
        let (src, dst): (Vec<Point3>, Vec<Point3>) = pairs.iter().copied().unzip();
        absolute_orientation(&src, &dst).unwrap_or_else(Pose::identity)
    } else {
        Pose::identity()
    };
    let sum: f64 = pairs
        .iter()
        .map(|(e, g)| (align.transform_point(e) - g).norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub total_ms: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub stage: String,
    pub total_ms: f64,
    pub per_frame_ms: f64,
}

/// Totals per stage, in first-seen order.
pub fn timing_report(logs: &[StageTiming]) -> Vec<TimingRow> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for l in logs {
        if l.frames == 0 {
            continue;
        }
        if !acc.contains_key(&l.stage) {
            order.push(l.stage.clone());
        }
        let e = acc.entry(l.stage.clone()).or_insert((0.0, 0));
        e.0 += l.total_ms;
        e.1 = e.1.max(l.frames);
    }
    order
        .into_iter()
        .map(|s| {
            let (total, frames) = acc[&s];
            TimingRow {
                per_frame_ms: total / frames as f64,
                stage: s,
                total_ms: total,
            }
        })
        .collect()
}

/// Threshold rows, one column per method, recall in percent.
pub fn format_recall_csv(columns: &[(String, RecallTable)]) -> String {
    let mut out = String::from("threshold_m");
    for (name, _) in columns {
        write!(out, ",{name}").unwrap();
    }
    out.push('\n');
    if let Some((_, first)) = columns.first() {
        for (i, t) in first.thresholds.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for (_, table) in columns {
                write!(out, ",{:.2}", 100.0 * table.recall[i]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn format_recall_text(columns: &[(String, RecallTable)]) -> String {
    let width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<10}", "thr (m)");
    for (name, _) in columns {
        write!(out, " {name:>width$}").unwrap();
    }
    out.push('\n');
    if let Some((_, first)) = columns.first() {
        for (i, t) in first.thresholds.iter().enumerate() {
            write!(out, "{:<10}", t).unwrap();
            for (_, table) in columns {
                write!(out, " {:>width$.2}", 100.0 * table.recall[i]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn format_timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("stage,total_ms,per_frame_ms\n");
    for r in rows {
        writeln!(out, "{},{:.3},{:.4}", r.stage, r.total_ms, r.per_frame_ms).unwrap();
    }
    out
}

pub fn format_timing_text(rows: &[TimingRow]) -> String {
    let mut out = format!("{:<12} {:>12} {:>14}\n", "stage", "total (ms)", "per frame (ms)");
    for r in rows {
        writeln!(out, "{:<12} {:>12.1} {:>14.3}", r.stage, r.total_ms, r.per_frame_ms).unwrap();
    }
    out
}
