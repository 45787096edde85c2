//! Browser demo: small simulated scenes run through the back-end, results
//! returned as JSON for the static page in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use msloc::evaluation::{recall_table, Trajectory};
use msloc::geometry::Pose;
use msloc::pipeline::{self, Inputs, PipelineConfig};
use msloc::refine::{refine, RefineConfig, Variant};
use msloc::simulator::{generate, Scenario, ScenarioConfig};

/// Ground-plane coordinates `(x, z)`.
type Path2 = Vec<[f64; 2]>;

#[derive(Serialize)]
pub struct Method {
    pub name: String,
    pub path: Path2,
    /// Percent of frames within each threshold.
    pub recall: Vec<f64>,
}

#[derive(Serialize)]
pub struct Comparison {
    pub thresholds: Vec<f64>,
    pub truth: Path2,
    pub methods: Vec<Method>,
}

#[derive(Serialize)]
pub struct Refinement {
    pub comparison: Comparison,
    /// Final weight per frame; `None` for frames without a prior.
    pub weights: Vec<Option<f64>>,
    /// Frames whose prior is known to be wrong.
    pub outliers: Vec<usize>,
    pub iterations: usize,
}

fn scene(seed: u32, n_frames: u32, f: impl FnOnce(&mut ScenarioConfig)) -> msloc::Result<(Scenario, Inputs, Trajectory, PipelineConfig)> {
    let mut cfg = ScenarioConfig {
        n_frames: n_frames.clamp(20, 400) as usize,
        seed: seed as u64,
        ..Default::default()
    };
    f(&mut cfg);
    let sc = generate(&cfg)?;
    let inputs = Inputs::from_scenario(&sc);
    let truth: Trajectory = sc.truth.timestamps.iter().copied().zip(sc.truth.poses.iter().copied()).collect();
    let mut pc = PipelineConfig::default();
    pc.localize.seed = seed as u64;
    Ok((sc, inputs, truth, pc))
}

fn ground(t: &Trajectory) -> Path2 {
    t.iter().map(|(_, p)| [p.translation.x, p.translation.z]).collect()
}

fn method(name: &str, inputs: &Inputs, poses: &[Option<Pose>], truth: &Trajectory, thr: &[f64]) -> msloc::Result<Method> {
    let t = inputs.trajectory(poses);
    Ok(Method {
        name: name.into(),
        recall: recall_table(&t, truth, thr)?.recall.iter().map(|r| 100.0 * r).collect(),
        path: ground(&t),
    })
}

fn all_some(p: &[Pose]) -> Vec<Option<Pose>> {
    p.iter().copied().map(Some).collect()
}

const THRESHOLDS: [f64; 6] = msloc::evaluation::DEFAULT_THRESHOLDS;

/// Pooled RANSAC against consensus when one session is biased by `bias` metres.
pub fn consensus_vs_merge_impl(seed: u32, n_frames: u32, bias: f64) -> msloc::Result<Comparison> {
    let (_, inputs, truth, pc) = scene(seed, n_frames, |c| c.incompatible_bias = bias.max(0.0))?;
    let candidates = pipeline::localize_all(&inputs, &pc.localize);
    let fusion = pipeline::fuse_all(&candidates, &inputs, &pc)?;
    let merged = pipeline::merge_baseline(&inputs, &pc.localize);
    Ok(Comparison {
        thresholds: THRESHOLDS.to_vec(),
        truth: ground(&truth),
        methods: vec![
            method("merge", &inputs, &merged, &truth, &THRESHOLDS)?,
            method("consensus", &inputs, &pipeline::chosen_poses(&fusion), &truth, &THRESHOLDS)?,
        ],
    })
}

/// Consensus poses before and after refinement, with the learned weights.
pub fn refine_demo_impl(seed: u32, n_frames: u32, gross_rate: f64, variant: &str) -> msloc::Result<Refinement> {
    let variant: Variant = variant.parse()?;
    let (sc, inputs, truth, pc) = scene(seed, n_frames, |c| c.gross_outlier_rate = gross_rate.clamp(0.0, 0.5))?;
    let candidates = pipeline::localize_all(&inputs, &pc.localize);
    let fusion = pipeline::fuse_all(&candidates, &inputs, &pc)?;
    let problem = pipeline::build_problem(&inputs, &fusion.chosen, &pc);
    let out = refine(&problem, &RefineConfig { variant, ..pc.refine })?;
    Ok(Refinement {
        comparison: Comparison {
            thresholds: THRESHOLDS.to_vec(),
            truth: ground(&truth),
            methods: vec![
                method("consensus", &inputs, &pipeline::chosen_poses(&fusion), &truth, &THRESHOLDS)?,
                method(&variant.to_string(), &inputs, &all_some(&out.state.poses), &truth, &THRESHOLDS)?,
            ],
        },
        weights: out.state.weights.clone(),
        outliers: sc.truth.outlier_prior_frames().into_iter().collect(),
        iterations: out.state.iteration,
    })
}

/// Recall of every stage on a dense threshold grid up to `max_threshold`.
pub fn recall_curve_impl(seed: u32, n_frames: u32, max_threshold: f64) -> msloc::Result<Comparison> {
    let (_, inputs, truth, pc) = scene(seed, n_frames, |_| {})?;
    let max = max_threshold.clamp(0.01, 5.0);
    let thr: Vec<f64> = (1..=40).map(|i| max * i as f64 / 40.0).collect();
    let out = pipeline::run(&inputs, &pc)?;
    let mut methods = vec![
        method("consensus", &inputs, &pipeline::chosen_poses(&out.fusion), &truth, &thr)?,
        method("refined", &inputs, &all_some(&out.refined.state.poses), &truth, &thr)?,
    ];
    if let Some(p) = &out.polished {
        methods.push(method("polished", &inputs, &all_some(&p.refined.state.poses), &truth, &thr)?);
    }
    Ok(Comparison {
        thresholds: thr,
        truth: ground(&truth),
        methods,
    })
}

fn json<T: Serialize>(r: msloc::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| format!("{{\"error\":{:?}}}", e.to_string())),
        Err(e) => serde_json::json!({ "error": e.to_string(), "kind": e.kind() }).to_string(),
    }
}

#[wasm_bindgen]
pub fn consensus_vs_merge(seed: u32, n_frames: u32, bias: f64) -> String {
    json(consensus_vs_merge_impl(seed, n_frames, bias))
}

#[wasm_bindgen]
pub fn refine_demo(seed: u32, n_frames: u32, gross_rate: f64, variant: &str) -> String {
    json(refine_demo_impl(seed, n_frames, gross_rate, variant))
}

#[wasm_bindgen]
pub fn recall_curve(seed: u32, n_frames: u32, max_threshold: f64) -> String {
    json(recall_curve_impl(seed, n_frames, max_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demos_produce_json() {
        let c = consensus_vs_merge_impl(1, 40, 0.5).unwrap();
        assert_eq!(c.methods.len(), 2);
        assert_eq!(c.truth.len(), 40);
        let r = refine_demo_impl(2, 40, 0.1, "PGO").unwrap();
        assert_eq!(r.weights.len(), 40);
        assert!(r.weights.iter().flatten().all(|w| *w > 0.0 && *w <= 1.0));
        let curve = recall_curve_impl(3, 30, 0.5).unwrap();
        assert!(curve.methods.iter().all(|m| m.recall.windows(2).all(|w| w[0] <= w[1])));
        assert!(refine_demo(1, 40, 0.1, "nope").contains("invalid_config"));
    }
}
