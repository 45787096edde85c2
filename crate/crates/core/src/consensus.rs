//! Multi-session consensus set maximization.
//!
//! Candidates of consecutive frames are joined by edges scored with the
//! number of tracked 2D-2D correspondences that agree (Sampson error under a
//! threshold) with the two candidate poses. Picking exactly one candidate per
//! frame so that the summed edge score is maximal is a 0-1 program with one
//! selected edge per consecutive pair and flow conservation at every node.
//! On a chain that program is a longest path through a trellis, which
//! [`solve_dp`] computes exactly. [`solve_ilp_oracle`] solves the same 0-1
//! program by branch and bound over the edge variables and is kept as a
//! cross-check.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{fundamental_from_poses, sampson_error, CameraIntrinsics, MatchSet2D2D, Pose};
use crate::localize::{Candidate, CandidateSet};

/// Tracked correspondences keyed by `(frame_a, frame_b)`.
pub type TrackStore = BTreeMap<(usize, usize), MatchSet2D2D>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeScore {
    pub inliers: u32,
    /// Baseline too short for an epipolar test; the score is forced to zero.
    pub degenerate: bool,
}

/// Number of correspondences consistent with both poses.
pub fn edge_score(
    pose_a: &Pose,
    pose_b: &Pose,
    matches: &MatchSet2D2D,
    k: &CameraIntrinsics,
    sampson_threshold: f64,
) -> u32 {
    edge_score_flagged(pose_a, pose_b, matches, k, sampson_threshold).inliers
}

pub fn edge_score_flagged(
    pose_a: &Pose,
    pose_b: &Pose,
    matches: &MatchSet2D2D,
    k: &CameraIntrinsics,
    sampson_threshold: f64,
) -> EdgeScore {
    if matches.is_empty() {
        return EdgeScore { inliers: 0, degenerate: false };
    }
    let Ok(f) = fundamental_from_poses(pose_a, pose_b, k, k) else {
        return EdgeScore { inliers: 0, degenerate: true };
    };
    let inliers = matches
        .pairs
        .iter()
        .filter(|(a, b)| matches!(sampson_error(&f, a, b), Ok(e) if e <= sampson_threshold))
        .count() as u32;
    EdgeScore { inliers, degenerate: false }
}

/// Scores between the nodes of two adjacent layers, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBlock {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<u32>,
    /// Joins layers whose frames are not consecutive.
    pub bridged: bool,
    pub degenerate: usize,
}

impl EdgeBlock {
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.scores[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u32) {
        self.scores[i * self.cols + j] = v;
    }

    pub fn zeros(rows: usize, cols: usize, bridged: bool) -> Self {
        Self {
            rows,
            cols,
            scores: vec![0; rows * cols],
            bridged,
            degenerate: 0,
        }
    }
}

/// Trellis over the frames that have at least one candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainGraph {
    /// Every frame of the sequence, ascending.
    pub frames: Vec<usize>,
    /// Frame ids of the layers (frames with candidates), ascending.
    pub layer_frames: Vec<usize>,
    /// Node count of each layer.
    pub nodes: Vec<usize>,
    /// `edges[l]` joins layer `l` to layer `l + 1`.
    pub edges: Vec<EdgeBlock>,
}

impl ChainGraph {
    /// Graph from explicit score matrices, one layer per frame `0..`.
    pub fn from_scores(nodes: Vec<usize>, blocks: Vec<Vec<Vec<u32>>>) -> Self {
        let edges = blocks
            .into_iter()
            .enumerate()
            .map(|(l, m)| {
                let rows = nodes[l];
                let cols = nodes[l + 1];
                assert_eq!(m.len(), rows);
                let scores: Vec<u32> = m.into_iter().flat_map(|r| {
                    assert_eq!(r.len(), cols);
                    r
                }).collect();
                EdgeBlock { rows, cols, scores, bridged: false, degenerate: 0 }
            })
            .collect();
        let frames: Vec<usize> = (0..nodes.len()).collect();
        Self {
            layer_frames: frames.clone(),
            frames,
            nodes,
            edges,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(|b| b.rows * b.cols).sum()
    }

    pub fn max_nodes(&self) -> usize {
        self.nodes.iter().copied().max().unwrap_or(0)
    }

    pub fn degenerate_edges(&self) -> usize {
        self.edges.iter().map(|b| b.degenerate).sum()
    }
}

/// Builds and scores the trellis. Frames without candidates are skipped and
/// their neighbours joined by a bridge scored with the skip track set
/// `(prev, next)` when one exists, zeros otherwise.
pub fn build_chain(
    candidates: &[CandidateSet],
    tracks: &TrackStore,
    k: &CameraIntrinsics,
    sampson_threshold: f64,
) -> Result<ChainGraph> {
    if candidates.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut sorted: Vec<&CandidateSet> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.frame);
    let frames: Vec<usize> = sorted.iter().map(|c| c.frame).collect();
    let layers: Vec<&CandidateSet> = sorted.into_iter().filter(|c| !c.is_empty()).collect();

    let empty = MatchSet2D2D::default();
    let edges: Vec<EdgeBlock> = layers
        .par_windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let bridged = b.frame != a.frame + 1;
            let matches = tracks.get(&(a.frame, b.frame)).unwrap_or(&empty);
            let mut block = EdgeBlock::zeros(a.len(), b.len(), bridged);
            for (i, ca) in a.candidates.iter().enumerate() {
                for (j, cb) in b.candidates.iter().enumerate() {
                    let s = edge_score_flagged(&ca.pose, &cb.pose, matches, k, sampson_threshold);
                    block.set(i, j, s.inliers);
                    block.degenerate += s.degenerate as usize;
                }
            }
            block
        })
        .collect();

    Ok(ChainGraph {
        frames,
        layer_frames: layers.iter().map(|c| c.frame).collect(),
        nodes: layers.iter().map(|c| c.len()).collect(),
        edges,
    })
}

/// One chosen candidate index per frame (`None` for frames without
/// candidates) and the summed edge score along the chosen path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub choices: Vec<(usize, Option<usize>)>,
    pub total: u64,
}

impl Selection {
    fn from_layers(graph: &ChainGraph, picks: &[usize], total: u64) -> Self {
        let by_frame: BTreeMap<usize, usize> = graph.layer_frames.iter().copied().zip(picks.iter().copied()).collect();
        Self {
            choices: graph.frames.iter().map(|f| (*f, by_frame.get(f).copied())).collect(),
            total,
        }
    }

    /// Chosen node index per layer.
    pub fn layer_picks(&self) -> Vec<usize> {
        self.choices.iter().filter_map(|(_, c)| *c).collect()
    }
}

/// Exact maximum-score path by forward dynamic programming. Ties go to the
/// lowest candidate index, both at the final layer and in every backpointer.
pub fn solve_dp(graph: &ChainGraph) -> Selection {
    let layers = graph.nodes.len();
    if layers == 0 {
        return Selection::from_layers(graph, &[], 0);
    }
    let mut value: Vec<u64> = vec![0; graph.nodes[0]];
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(layers);
    back.push(Vec::new());
    for (l, block) in graph.edges.iter().enumerate() {
        let cols = graph.nodes[l + 1];
        let mut next = vec![0u64; cols];
        let mut ptr = vec![0usize; cols];
        for j in 0..cols {
            let mut best = (0usize, None::<u64>);
            for (i, v) in value.iter().enumerate() {
                let cand = v + block.get(i, j) as u64;
                if best.1.is_none_or(|b| cand > b) {
                    best = (i, Some(cand));
                }
            }
            next[j] = best.1.unwrap_or(0);
            ptr[j] = best.0;
        }
        value = next;
        back.push(ptr);
    }
    let (mut node, total) = value
        .iter()
        .enumerate()
        .fold((0usize, None::<u64>), |acc, (i, v)| match acc.1 {
            Some(b) if *v <= b => acc,
            _ => (i, Some(*v)),
        });
    let mut picks = vec![0usize; layers];
    for l in (0..layers).rev() {
        picks[l] = node;
        if l > 0 {
            node = back[l][node];
        }
    }
    Selection::from_layers(graph, &picks, total.unwrap_or(0))
}

/// Binary program `max cᵀx` subject to integer equality rows.
#[derive(Clone, Debug)]
pub struct BinaryProgram {
    pub objective: Vec<i64>,
    /// Sparse rows `(coefficients, rhs)`.
    pub rows: Vec<(Vec<(usize, i64)>, i64)>,
}

impl BinaryProgram {
    /// Exhaustive depth-first branch and bound; returns the optimal
    /// assignment or `None` when infeasible.
    pub fn solve(&self) -> Option<(Vec<u8>, i64)> {
        let n = self.objective.len();
        let mut var_rows: Vec<Vec<(usize, i64)>> = vec![Vec::new(); n];
        for (r, (coeffs, _)) in self.rows.iter().enumerate() {
            for &(v, c) in coeffs {
                var_rows[v].push((r, c));
            }
        }
        // rows of the form Σ x = 1 give a tighter bound than Σ max(c, 0)
        let gub: Vec<bool> = self
            .rows
            .iter()
            .map(|(c, rhs)| *rhs == 1 && c.iter().all(|(_, a)| *a == 1))
            .collect();
        let mut var_gub: Vec<Option<usize>> = vec![None; n];
        for (r, (coeffs, _)) in self.rows.iter().enumerate() {
            if gub[r] {
                for &(v, _) in coeffs {
                    var_gub[v].get_or_insert(r);
                }
            }
        }
        let mut search = Search {
            prog: self,
            var_rows,
            var_gub,
            gub,
            assign: vec![0u8; n],
            sum: vec![0i64; self.rows.len()],
            pos_free: self
                .rows
                .iter()
                .map(|(c, _)| c.iter().filter(|(_, a)| *a > 0).map(|(_, a)| *a).sum())
                .collect(),
            neg_free: self
                .rows
                .iter()
                .map(|(c, _)| c.iter().filter(|(_, a)| *a < 0).map(|(_, a)| -*a).sum())
                .collect(),
            best: None,
        };
        search.dfs(0, 0);
        search.best
    }
}

struct Search<'a> {
    prog: &'a BinaryProgram,
    var_rows: Vec<Vec<(usize, i64)>>,
    var_gub: Vec<Option<usize>>,
    gub: Vec<bool>,
    assign: Vec<u8>,
    sum: Vec<i64>,
    pos_free: Vec<i64>,
    neg_free: Vec<i64>,
    best: Option<(Vec<u8>, i64)>,
}

impl Search<'_> {
    fn feasible_rows(&self, v: usize) -> bool {
        self.var_rows[v].iter().all(|&(r, _)| {
            let rhs = self.prog.rows[r].1;
            let lo = self.sum[r] - self.neg_free[r];
            let hi = self.sum[r] + self.pos_free[r];
            lo <= rhs && rhs <= hi
        })
    }

    fn set(&mut self, v: usize, val: u8, sign: i64) {
        for &(r, c) in &self.var_rows[v] {
            if c > 0 {
                self.pos_free[r] -= sign * c;
            } else {
                self.neg_free[r] -= sign * (-c);
            }
            self.sum[r] += sign * c * val as i64;
        }
    }

    fn upper_bound(&self, from: usize, current: i64) -> i64 {
        let mut bound = current;
        let mut gub_best: BTreeMap<usize, i64> = BTreeMap::new();
        for v in from..self.assign.len() {
            let c = self.prog.objective[v];
            match self.var_gub[v] {
                Some(r) if self.gub[r] => {
                    if self.sum[r] == 0 {
                        let e = gub_best.entry(r).or_insert(0);
                        *e = (*e).max(c);
                    }
                }
                _ => bound += c.max(0),
            }
        }
        bound + gub_best.values().sum::<i64>()
    }

    fn dfs(&mut self, v: usize, current: i64) {
        let n = self.assign.len();
        if v == n {
            if self.prog.rows.iter().enumerate().all(|(r, (_, rhs))| self.sum[r] == *rhs)
                && self.best.as_ref().is_none_or(|(_, b)| current > *b)
            {
                self.best = Some((self.assign.clone(), current));
            }
            return;
        }
        if let Some((_, b)) = &self.best {
            if self.upper_bound(v, current) <= *b {
                return;
            }
        }
        for val in [1u8, 0u8] {
            self.assign[v] = val;
            self.set(v, val, 1);
            if self.feasible_rows(v) {
                self.dfs(v + 1, current + self.prog.objective[v] * val as i64);
            }
            self.set(v, val, -1);
            self.assign[v] = 0;
        }
    }
}

/// Largest graph the exhaustive oracle accepts.
pub const ORACLE_MAX_FRAMES: usize = 12;
pub const ORACLE_MAX_CANDIDATES: usize = 4;

/// Edge-variable index of `(block, i, j)` in the oracle's program layout.
fn edge_offsets(graph: &ChainGraph) -> Vec<usize> {
    let mut offs = Vec::with_capacity(graph.edges.len());
    let mut acc = 0;
    for b in &graph.edges {
        offs.push(acc);
        acc += b.rows * b.cols;
    }
    offs
}

/// The consensus 0-1 program over edge variables: one selected edge per
/// adjacent layer pair, and at each inner node the selected incoming edges
/// equal the selected outgoing ones.
pub fn edge_program(graph: &ChainGraph) -> BinaryProgram {
    let offs = edge_offsets(graph);
    let mut objective = Vec::new();
    for b in &graph.edges {
        objective.extend(b.scores.iter().map(|s| *s as i64));
    }
    let mut rows = Vec::new();
    for (l, b) in graph.edges.iter().enumerate() {
        rows.push(((0..b.rows * b.cols).map(|e| (offs[l] + e, 1)).collect(), 1));
    }
    for m in 1..graph.edges.len() {
        let (inb, outb) = (&graph.edges[m - 1], &graph.edges[m]);
        for j in 0..graph.nodes[m] {
            let mut coeffs: Vec<(usize, i64)> = (0..inb.rows).map(|i| (offs[m - 1] + i * inb.cols + j, 1)).collect();
            coeffs.extend((0..outb.cols).map(|l| (offs[m] + j * outb.cols + l, -1)));
            rows.push((coeffs, 0));
        }
    }
    BinaryProgram { objective, rows }
}

/// Branch-and-bound solution of [`edge_program`].
pub fn solve_ilp_oracle(graph: &ChainGraph) -> Result<Selection> {
    let layers = graph.nodes.len();
    if layers > ORACLE_MAX_FRAMES || graph.max_nodes() > ORACLE_MAX_CANDIDATES {
        return Err(Error::TooLarge {
            frames: layers,
            max_candidates: graph.max_nodes(),
        });
    }
    if layers <= 1 {
        let picks = vec![0; layers];
        return Ok(Selection::from_layers(graph, &picks, 0));
    }
    let (x, total) = edge_program(graph).solve().ok_or(Error::EmptySequence)?;
    let offs = edge_offsets(graph);
    let mut picks = vec![0usize; layers];
    for (l, b) in graph.edges.iter().enumerate() {
        let e = (0..b.rows * b.cols).find(|e| x[offs[l] + e] == 1).expect("one edge per pair");
        picks[l] = e / b.cols;
        picks[l + 1] = e % b.cols;
    }
    Ok(Selection::from_layers(graph, &picks, total as u64))
}

/// Re-encodes a selection as edge variables, block by block.
pub fn selection_edges(graph: &ChainGraph, sel: &Selection) -> Vec<Vec<u8>> {
    let picks = sel.layer_picks();
    graph
        .edges
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let mut v = vec![0u8; b.rows * b.cols];
            v[picks[l] * b.cols + picks[l + 1]] = 1;
            v
        })
        .collect()
}

/// Checks both constraint families of the edge program.
pub fn edges_satisfy_constraints(graph: &ChainGraph, edges: &[Vec<u8>]) -> bool {
    if edges.len() != graph.edges.len() {
        return false;
    }
    let one_per_pair = edges.iter().all(|e| e.iter().map(|v| *v as u32).sum::<u32>() == 1);
    let flow = (1..graph.edges.len()).all(|m| {
        let (inb, outb) = (&graph.edges[m - 1], &graph.edges[m]);
        (0..graph.nodes[m]).all(|j| {
            let incoming: u32 = (0..inb.rows).map(|i| edges[m - 1][i * inb.cols + j] as u32).sum();
            let outgoing: u32 = (0..outb.cols).map(|l| edges[m][j * outb.cols + l] as u32).sum();
            incoming == outgoing
        })
    });
    one_per_pair && flow
}

/// Consensus output: the graph, the selection, and the chosen candidate of
/// every frame.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub graph: ChainGraph,
    pub selection: Selection,
    pub chosen: Vec<(usize, Option<Candidate>)>,
}

impl Fusion {
    /// `(frame, chosen session, score of the edge entering the chosen node)`;
    /// the scores sum to the selection total.
    pub fn frame_scores(&self) -> Vec<(usize, Option<u32>, u64)> {
        let picks = self.selection.layer_picks();
        let mut layer = 0usize;
        self.chosen
            .iter()
            .map(|(f, c)| match c {
                Some(c) => {
                    let score = if layer == 0 {
                        0
                    } else {
                        self.graph.edges[layer - 1].get(picks[layer - 1], picks[layer]) as u64
                    };
                    layer += 1;
                    (*f, Some(c.session), score)
                }
                None => (*f, None, 0),
            })
            .collect()
    }
}

pub fn fuse(
    candidates: &[CandidateSet],
    tracks: &TrackStore,
    k: &CameraIntrinsics,
    sampson_threshold: f64,
) -> Result<Fusion> {
    let graph = build_chain(candidates, tracks, k, sampson_threshold)?;
    let selection = solve_dp(&graph);
    let by_frame: BTreeMap<usize, &CandidateSet> = candidates.iter().map(|c| (c.frame, c)).collect();
    let chosen = selection
        .choices
        .iter()
        .map(|(f, pick)| (*f, pick.map(|i| by_frame[f].candidates[i].clone())))
        .collect();
    Ok(Fusion { graph, selection, chosen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, project, Point2, Point3};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    /// Brute force over every assignment of one node per layer.
    fn brute_force(graph: &ChainGraph) -> u64 {
        let layers = graph.nodes.len();
        let mut idx = vec![0usize; layers];
        let mut best = 0u64;
        loop {
            let s: u64 = (0..layers.saturating_sub(1)).map(|l| graph.edges[l].get(idx[l], idx[l + 1]) as u64).sum();
            best = best.max(s);
            let mut l = 0;
            loop {
                if l == layers {
                    return best;
                }
                idx[l] += 1;
                if idx[l] < graph.nodes[l] {
                    break;
                }
                idx[l] = 0;
                l += 1;
            }
        }
    }

    fn random_graph(rng: &mut Pcg64, max_k: usize, max_c: usize) -> ChainGraph {
        let k = rng.random_range(1..=max_k);
        let nodes: Vec<usize> = (0..k).map(|_| rng.random_range(1..=max_c)).collect();
        let blocks = (0..k - 1)
            .map(|l| (0..nodes[l]).map(|_| (0..nodes[l + 1]).map(|_| rng.random_range(0..=100)).collect()).collect())
            .collect();
        ChainGraph::from_scores(nodes, blocks)
    }

    #[test]
    fn dp_two_by_two() {
        let g = ChainGraph::from_scores(vec![2, 2], vec![vec![vec![5, 1], vec![2, 3]]]);
        let s = solve_dp(&g);
        assert_eq!(s.layer_picks(), vec![0, 0]);
        assert_eq!(s.total, 5);
    }

    #[test]
    fn dp_three_frames_against_brute_force() {
        let g = ChainGraph::from_scores(
            vec![2, 2, 2],
            vec![vec![vec![1, 4], vec![2, 1]], vec![vec![3, 0], vec![0, 6]]],
        );
        let s = solve_dp(&g);
        assert_eq!(s.total, brute_force(&g));
        assert_eq!(s.total, 10);
        // (frame1: 0, frame2: 1, frame3: 1) scores 4 + 6
        assert_eq!(s.layer_picks(), vec![0, 1, 1]);
    }

    #[test]
    fn dp_ties_pick_lowest_index() {
        let g = ChainGraph::from_scores(vec![3, 3, 3], vec![vec![vec![7; 3]; 3], vec![vec![7; 3]; 3]]);
        assert_eq!(solve_dp(&g).layer_picks(), vec![0, 0, 0]);
    }

    #[test]
    fn single_frame_graph() {
        let g = ChainGraph::from_scores(vec![3], vec![]);
        let dp = solve_dp(&g);
        let ilp = solve_ilp_oracle(&g).unwrap();
        assert_eq!(dp.layer_picks(), vec![0]);
        assert_eq!(ilp.layer_picks(), vec![0]);
        assert_eq!((dp.total, ilp.total), (0, 0));
    }

    #[test]
    fn oracle_rejects_large_graphs() {
        let g = ChainGraph::from_scores(vec![5, 5], vec![vec![vec![1; 5]; 5]]);
        assert!(matches!(solve_ilp_oracle(&g), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn dp_equals_oracle_and_brute_force() {
        let mut rng = Pcg64::seed_from_u64(42);
        for _ in 0..300 {
            let g = random_graph(&mut rng, 8, 3);
            let dp = solve_dp(&g);
            let ilp = solve_ilp_oracle(&g).unwrap();
            let bf = brute_force(&g);
            assert_eq!(dp.total, bf);
            assert_eq!(ilp.total, bf);
            assert!(edges_satisfy_constraints(&g, &selection_edges(&g, &dp)));
            assert!(edges_satisfy_constraints(&g, &selection_edges(&g, &ilp)));
        }
    }

    proptest! {
        #[test]
        fn raising_on_path_edge_keeps_selection(seed in 0u64..10_000, bump in 1u32..50) {
            let mut rng = Pcg64::seed_from_u64(seed);
            let mut g = random_graph(&mut rng, 7, 3);
            prop_assume!(g.nodes.len() >= 2);
            let before = solve_dp(&g);
            let picks = before.layer_picks();
            let l = rng.random_range(0..g.edges.len());
            let v = g.edges[l].get(picks[l], picks[l + 1]);
            g.edges[l].set(picks[l], picks[l + 1], v + bump);
            let after = solve_dp(&g);
            prop_assert_eq!(after.layer_picks(), picks);
            prop_assert_eq!(after.total, before.total + bump as u64);
        }

        #[test]
        fn raising_off_path_edge_reroutes(seed in 0u64..10_000) {
            let mut rng = Pcg64::seed_from_u64(seed);
            let mut g = random_graph(&mut rng, 7, 3);
            prop_assume!(g.nodes.len() >= 2);
            let before = solve_dp(&g);
            let picks = before.layer_picks();
            let l = rng.random_range(0..g.edges.len());
            let (rows, cols) = (g.edges[l].rows, g.edges[l].cols);
            let off: Vec<(usize, usize)> = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .filter(|&(i, j)| (i, j) != (picks[l], picks[l + 1]))
                .collect();
            prop_assume!(!off.is_empty());
            let (i, j) = off[rng.random_range(0..off.len())];
            // margin: the whole current optimum plus one
            let v = g.edges[l].get(i, j);
            g.edges[l].set(i, j, v + before.total as u32 + 1);
            let after = solve_dp(&g);
            let p = after.layer_picks();
            prop_assert_eq!((p[l], p[l + 1]), (i, j));
        }
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    /// Forward-moving camera pair over a random point cloud.
    fn two_view(seed: u64, n: usize) -> (Pose, Pose, MatchSet2D2D) {
        let k = camera();
        let a = Pose::identity();
        let b = Pose::new(exp_so3(&Vector3::new(0.0, 0.02, 0.0)), Vector3::new(0.1, 0.0, 1.0));
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut set = MatchSet2D2D::new(0, 1);
        while set.len() < n {
            let x = Point3::new(rng.random_range(-8.0..8.0), rng.random_range(-2.0..3.0), rng.random_range(6.0..40.0));
            if let (Ok(pa), Ok(pb)) = (project(&a, &k, &x), project(&b, &k, &x)) {
                if k.contains(&pa) && k.contains(&pb) {
                    set.pairs.push((pa, pb));
                }
            }
        }
        (a, b, set)
    }

    #[test]
    fn edge_score_examples() {
        let k = camera();
        let (a, b, set) = two_view(1, 100);
        assert_eq!(edge_score(&a, &b, &set, &k, 4.0), 100);
        assert_eq!(edge_score(&a, &b, &MatchSet2D2D::default(), &k, 4.0), 0);
        let displaced = Pose::new(exp_so3(&Vector3::new(0.2, 0.0, 0.1)) * b.rotation, b.translation + Vector3::new(0.0, 2.0, 0.0));
        let s = edge_score(&a, &displaced, &set, &k, 4.0);
        assert!(s < 20, "{s}");
        let flagged = edge_score_flagged(&a, &a, &set, &k, 4.0);
        assert_eq!(flagged, EdgeScore { inliers: 0, degenerate: true });
    }

    #[test]
    fn edge_score_equals_independent_count() {
        let k = camera();
        let mut rng = Pcg64::seed_from_u64(77);
        for trial in 0..100 {
            let (a, b, mut set) = two_view(trial, 60);
            for p in set.pairs.iter_mut() {
                p.1 += Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            }
            let b = b.retract(&nalgebra::Vector6::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            ));
            // oracle: essential matrix from raw rotation matrices, Sampson in
            // normalized coordinates rescaled by the focal length
            let ra = a.rotation_matrix();
            let rb = b.rotation_matrix();
            let r = rb.transpose() * ra;
            let t = rb.transpose() * (a.translation - b.translation);
            let tx = nalgebra::Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
            let kinv = k.inverse_matrix();
            let f = kinv.transpose() * tx * r * kinv;
            let expected = set
                .pairs
                .iter()
                .filter(|(pa, pb)| {
                    let xa = Vector3::new(pa.x, pa.y, 1.0);
                    let xb = Vector3::new(pb.x, pb.y, 1.0);
                    let fa = f * xa;
                    let fb = f.transpose() * xb;
                    let num = xb.dot(&fa).powi(2);
                    num / (fa.x * fa.x + fa.y * fa.y + fb.x * fb.x + fb.y * fb.y) <= 4.0
                })
                .count() as u32;
            assert_eq!(edge_score(&a, &b, &set, &k, 4.0), expected);
        }
    }

    fn cand(session: u32, pose: Pose) -> Candidate {
        Candidate { session, pose, inliers: Vec::new() }
    }

    #[test]
    fn build_chain_edge_counts_and_bridge() {
        let k = camera();
        let p = |x: f64| Pose::from_translation(Vector3::new(0.0, 0.0, x));
        let sets = vec![
            CandidateSet::new(0, vec![cand(0, p(0.0)), cand(1, p(0.1)), cand(2, p(0.0))]),
            CandidateSet::new(1, vec![cand(0, p(1.0)), cand(2, p(1.1))]),
            CandidateSet::new(2, vec![]),
            CandidateSet::new(3, vec![cand(0, p(3.0)), cand(1, p(3.0)), cand(2, p(3.0))]),
        ];
        let g = build_chain(&sets, &TrackStore::new(), &k, 4.0).unwrap();
        assert_eq!(g.nodes, vec![3, 2, 3]);
        assert_eq!(g.edges[0].rows * g.edges[0].cols, 3 * 2);
        assert!(g.edges[1].bridged);
        assert!(g.edge_count() <= (g.frames.len() - 1) * 3 * 3);
        let sel = solve_dp(&g);
        assert_eq!(sel.choices.len(), 4);
        assert_eq!(sel.choices[2], (2, None));
        assert!(sel.choices.iter().filter(|(f, _)| *f != 2).all(|(_, c)| c.is_some()));

        let two = vec![
            CandidateSet::new(0, vec![cand(0, p(0.0)), cand(1, p(0.0))]),
            CandidateSet::new(1, vec![cand(0, p(1.0)), cand(1, p(1.0))]),
        ];
        assert_eq!(build_chain(&two, &TrackStore::new(), &k, 4.0).unwrap().edge_count(), 4);
        assert!(matches!(build_chain(&[], &TrackStore::new(), &k, 4.0), Err(Error::EmptySequence)));
    }
}
