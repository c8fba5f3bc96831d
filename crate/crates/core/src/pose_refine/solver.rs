use log::debug;
use nalgebra::{DMatrix, DVector, Vector6};
use rayon::prelude::*;
use serde::Serialize;

use super::residual::{cost_with_depths, edge_residual, linearize_edge, CostSummary, ParamBlock, RobustLoss, EDGE_CHUNK};
use super::{CorrespondenceEdge, CorrespondenceGraph, PoseRefineError};
use crate::geometry::{Intrinsics, RigState};

/// Parameter blocks held constant during optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Gauge {
    pub fixed_egos: Vec<usize>,
    pub fixed_deltas: Vec<usize>,
    /// Keep the median point depth at its initial value.
    ///
    /// With free depths all camera centres can be scaled about the fixed
    /// camera, together with the depths, without changing any residual.
    /// After each step the solution is moved back along that direction.
    pub hold_depth_scale: bool,
}

impl Default for Gauge {
    /// First ego pose, the camera-0 offset and the overall depth scale.
    fn default() -> Self {
        Self { fixed_egos: vec![0], fixed_deltas: vec![0], hold_depth_scale: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Damping ceiling; reaching it without progress stops the solver.
    pub max_damping: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub convergence_tol: f64,
    /// Stop when the cost falls below this absolute value.
    pub cost_floor: f64,
    pub huber_delta: f64,
    pub use_huber: bool,
    pub optimize_point_depths: bool,
    pub gauge: Gauge,
    /// After a round converges, edges whose residual exceeds this many
    /// pixels are dropped and the problem is solved again. With free depths
    /// the first round holds depths at their stored values, since a free
    /// depth lets a bad match slide along its epipolar line and hide.
    pub outlier_threshold_px: Option<f64>,
    /// Upper bound on solve rounds, the first included.
    pub max_rounds: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 3.0,
            max_damping: 1e12,
            convergence_tol: 1e-12,
            cost_floor: 1e-20,
            huber_delta: 2.0,
            use_huber: true,
            optimize_point_depths: true,
            gauge: Gauge::default(),
            outlier_threshold_px: Some(4.0),
            max_rounds: 3,
        }
    }
}

impl SolverOptions {
    pub fn loss(&self) -> RobustLoss {
        if self.use_huber {
            RobustLoss::Huber { delta: self.huber_delta }
        } else {
            RobustLoss::Squared
        }
    }

    fn validate(&self) -> Result<(), PoseRefineError> {
        if !(self.initial_damping > 0.0) || !(self.huber_delta > 0.0) {
            return Err(PoseRefineError::InvalidOptions("damping and huber_delta must be positive".into()));
        }
        if self.outlier_threshold_px.is_some_and(|t| !(t > 0.0)) || self.max_rounds == 0 {
            return Err(PoseRefineError::InvalidOptions("outlier threshold must be positive and max_rounds nonzero".into()));
        }
        if !(self.damping_up > 1.0 && self.damping_down > 1.0) {
            return Err(PoseRefineError::InvalidOptions("damping factors must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Initial cost already at the floor.
    AlreadyOptimal,
    CostFloor,
    RelativeDecrease,
    /// Damping ceiling hit after at least one accepted step.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_skipped_edges: usize,
    pub final_skipped_edges: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    pub rounds: usize,
    /// Edges dropped as outliers; their depths are left as last estimated.
    pub rejected_edges: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub rig: RigState,
    /// Per-edge depths in the source camera, in graph order.
    pub depths: Vec<f64>,
    pub report: SolveReport,
}

/// Maps free parameter blocks to columns of the reduced system.
struct Layout {
    ego_offset: Vec<Option<usize>>,
    delta_offset: Vec<Option<usize>>,
    dim: usize,
}

impl Layout {
    fn new(n_egos: usize, n_deltas: usize, gauge: &Gauge) -> Self {
        let mut dim = 0;
        let mut next = |fixed: bool| {
            if fixed {
                None
            } else {
                dim += 6;
                Some(dim - 6)
            }
        };
        let ego_offset = (0..n_egos).map(|i| next(gauge.fixed_egos.contains(&i))).collect();
        let delta_offset = (0..n_deltas).map(|k| next(gauge.fixed_deltas.contains(&k))).collect();
        Self { ego_offset, delta_offset, dim }
    }

    fn offset(&self, b: ParamBlock) -> Option<usize> {
        match b {
            ParamBlock::Ego(i) => self.ego_offset[i],
            ParamBlock::Delta(k) => self.delta_offset[k],
        }
    }
}

/// Per-edge terms coupling the pose blocks with that edge's inverse depth.
struct DepthCoupling {
    offsets: [Option<usize>; 4],
    /// `w Jₚᵀ j_ρ`, per local block.
    h: [Vector6<f64>; 4],
    h_rr: f64,
    g_r: f64,
}

struct NormalEquations {
    h_pp: DMatrix<f64>,
    g_p: DVector<f64>,
    couplings: Vec<Option<DepthCoupling>>,
}

fn build_normal_equations(
    graph: &CorrespondenceGraph,
    depths: &[f64],
    rig: &RigState,
    intrinsics: &[Intrinsics],
    layout: &Layout,
    loss: RobustLoss,
    with_depths: bool,
) -> Result<NormalEquations, PoseRefineError> {
    let n = layout.dim;
    let partials: Vec<Result<NormalEquations, PoseRefineError>> = graph
        .edges
        .par_chunks(EDGE_CHUNK)
        .zip(depths.par_chunks(EDGE_CHUNK))
        .map(|(edges, depths)| {
            let mut h_pp = DMatrix::zeros(n, n);
            let mut g_p = DVector::zeros(n);
            let mut couplings = Vec::with_capacity(edges.len());
            for (edge, &depth) in edges.iter().zip(depths) {
                let lin = match linearize_edge(edge, depth, rig, intrinsics) {
                    Ok(lin) => lin,
                    Err(PoseRefineError::PointBehindCamera(_)) | Err(PoseRefineError::Geometry(_)) => {
                        couplings.push(None);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let w = edge.weight * loss.irls_weight(lin.residual.norm());
                let offsets = lin.blocks.map(|(b, _)| layout.offset(b));
                for (a, (_, ja)) in lin.blocks.iter().enumerate() {
                    let Some(oa) = offsets[a] else { continue };
                    let jt_r = ja.transpose() * lin.residual * w;
                    for r in 0..6 {
                        g_p[oa + r] += jt_r[r];
                    }
                    for (b, (_, jb)) in lin.blocks.iter().enumerate() {
                        let Some(ob) = offsets[b] else { continue };
                        let blk = ja.transpose() * jb * w;
                        for r in 0..6 {
                            for c in 0..6 {
                                h_pp[(oa + r, ob + c)] += blk[(r, c)];
                            }
                        }
                    }
                }
                if with_depths {
                    let jr = lin.d_inv_depth;
                    let h = lin.blocks.map(|(_, ja)| ja.transpose() * jr * w);
                    couplings.push(Some(DepthCoupling {
                        offsets,
                        h,
                        h_rr: w * jr.dot(&jr),
                        g_r: w * jr.dot(&lin.residual),
                    }));
                } else {
                    couplings.push(None);
                }
            }
            Ok(NormalEquations { h_pp, g_p, couplings })
        })
        .collect();

    let mut total = NormalEquations { h_pp: DMatrix::zeros(n, n), g_p: DVector::zeros(n), couplings: Vec::new() };
    for p in partials {
        let p = p?;
        total.h_pp += p.h_pp;
        total.g_p += p.g_p;
        total.couplings.extend(p.couplings);
    }
    Ok(total)
}

/// Solves the damped system; returns pose and inverse-depth increments.
fn damped_step(ne: &NormalEquations, lambda: f64) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = ne.g_p.len();
    let mut s = ne.h_pp.clone();
    for d in 0..n {
        s[(d, d)] += lambda * ne.h_pp[(d, d)].max(1e-9);
    }
    let mut b = ne.g_p.clone();
    let damped_rr = |c: &DepthCoupling| c.h_rr * (1.0 + lambda) + 1e-12;
    for c in ne.couplings.iter().flatten() {
        let inv = 1.0 / damped_rr(c);
        for (a, oa) in c.offsets.iter().enumerate() {
            let Some(oa) = *oa else { continue };
            for r in 0..6 {
                b[oa + r] -= c.h[a][r] * c.g_r * inv;
            }
            for (bb, ob) in c.offsets.iter().enumerate() {
                let Some(ob) = *ob else { continue };
                for r in 0..6 {
                    for col in 0..6 {
                        s[(oa + r, ob + col)] -= c.h[a][r] * c.h[bb][col] * inv;
                    }
                }
            }
        }
    }
    let dp = if n == 0 { DVector::zeros(0) } else { s.cholesky()?.solve(&(-b)) };
    let d_rho = ne
        .couplings
        .iter()
        .map(|c| match c {
            Some(c) => {
                let mut coupled = c.g_r;
                for (a, oa) in c.offsets.iter().enumerate() {
                    if let Some(oa) = *oa {
                        coupled += c.h[a].dot(&dp.rows(oa, 6));
                    }
                }
                -coupled / damped_rr(c)
            }
            None => 0.0,
        })
        .collect();
    Some((dp, d_rho))
}

fn apply_step(rig: &RigState, depths: &[f64], layout: &Layout, dp: &DVector<f64>, d_rho: &[f64]) -> (RigState, Vec<f64>) {
    let mut out = rig.clone();
    for (i, off) in layout.ego_offset.iter().enumerate() {
        if let Some(o) = off {
            out.ego_poses[i] = rig.ego_poses[i].left_update(&Vector6::from_iterator(dp.rows(*o, 6).iter().copied()));
        }
    }
    for (k, off) in layout.delta_offset.iter().enumerate() {
        if let Some(o) = off {
            out.deltas[k] = rig.deltas[k].left_update(&Vector6::from_iterator(dp.rows(*o, 6).iter().copied()));
        }
    }
    let new_depths = depths
        .iter()
        .zip(d_rho)
        .map(|(&d, &dr)| {
            let rho = 1.0 / d + dr;
            if dr == 0.0 {
                d
            } else if rho > 0.0 {
                1.0 / rho
            } else {
                d
            }
        })
        .collect();
    (out, new_depths)
}

/// Median of the log depths; unlike the mean it ignores the few outlier
/// edges whose depths run off while the solver explains them away.
fn median_log(depths: &[f64]) -> f64 {
    let mut logs: Vec<f64> = depths.iter().map(|d| d.ln()).collect();
    let mid = logs.len() / 2;
    let (_, m, _) = logs.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Scales every camera centre about the centre of the fixed (ego, camera)
/// pair, and every depth, so that the median log depth equals `target`.
fn normalize_scale(rig: &mut RigState, depths: &mut [f64], ego: usize, cam: usize, target: f64) {
    let s = (target - median_log(depths)).exp();
    let anchor_delta = rig.deltas[cam].translation;
    let e0 = &rig.ego_poses[ego];
    let centre = e0.translation + e0.rotation * anchor_delta;
    for e in rig.ego_poses.iter_mut().enumerate().filter(|(i, _)| *i != ego).map(|(_, e)| e) {
        let rotated = e.rotation * anchor_delta;
        e.translation = centre + (e.translation + rotated - centre) * s - rotated;
    }
    for d in rig.deltas.iter_mut().enumerate().filter(|(k, _)| *k != cam).map(|(_, d)| d) {
        d.translation = anchor_delta + (d.translation - anchor_delta) * s;
    }
    for d in depths.iter_mut() {
        *d *= s;
    }
}

fn check_observed(graph: &CorrespondenceGraph, layout: &Layout) -> Result<(), PoseRefineError> {
    let mut ego_seen = vec![false; layout.ego_offset.len()];
    let mut delta_seen = vec![false; layout.delta_offset.len()];
    for e in &graph.edges {
        for v in [e.src, e.dst] {
            ego_seen[v.timestamp] = true;
            delta_seen[v.camera] = true;
        }
    }
    for (i, seen) in ego_seen.iter().enumerate() {
        if !seen && layout.ego_offset[i].is_some() {
            return Err(PoseRefineError::Unobserved(ParamBlock::Ego(i)));
        }
    }
    for (k, seen) in delta_seen.iter().enumerate() {
        if !seen && layout.delta_offset[k].is_some() {
            return Err(PoseRefineError::Unobserved(ParamBlock::Delta(k)));
        }
    }
    Ok(())
}

/// Levenberg–Marquardt over ego poses and camera offsets.
///
/// Accepted steps strictly decrease the robust cost and never increase the
/// number of edges that fall behind their destination camera. Gauge-fixed
/// blocks are returned untouched.
pub fn solve(
    graph: &CorrespondenceGraph,
    init: &RigState,
    intrinsics: &[Intrinsics],
    opts: &SolverOptions,
) -> Result<Solution, PoseRefineError> {
    opts.validate()?;
    if graph.is_empty() {
        return Err(PoseRefineError::EmptyGraph);
    }
    graph.validate()?;
    if init.n_timestamps() != graph.n_timestamps || init.n_cameras() != graph.n_cameras {
        return Err(PoseRefineError::InvalidOptions(format!(
            "rig has {}x{} views but graph expects {}x{}",
            init.n_timestamps(),
            init.n_cameras(),
            graph.n_timestamps,
            graph.n_cameras
        )));
    }
    let layout = Layout::new(init.n_timestamps(), init.n_cameras(), &opts.gauge);
    check_observed(graph, &layout)?;

    let mut active: Vec<usize> = (0..graph.len()).collect();
    let mut depths: Vec<f64> = graph.edges.iter().map(|e| e.depth_q).collect();
    let mut rig = init.clone();
    let mut report: Option<SolveReport> = None;
    let screening = opts.optimize_point_depths && opts.outlier_threshold_px.is_some() && opts.max_rounds > 1;
    loop {
        let first = report.is_none();
        let screen_opts = SolverOptions { optimize_point_depths: false, ..opts.clone() };
        let round_opts = if first && screening { &screen_opts } else { opts };
        let sub = CorrespondenceGraph {
            edges: active.iter().map(|&n| CorrespondenceEdge { depth_q: depths[n], ..graph.edges[n].clone() }).collect(),
            n_timestamps: graph.n_timestamps,
            n_cameras: graph.n_cameras,
        };
        let (r, d, round) = run_lm(&sub, &rig, intrinsics, &layout, round_opts)?;
        rig = r;
        for (&n, d) in active.iter().zip(d) {
            depths[n] = d;
        }
        let total = match report.take() {
            None => round,
            Some(mut acc) => {
                acc.iterations += round.iterations;
                acc.accepted_steps += round.accepted_steps;
                acc.rejected_steps += round.rejected_steps;
                acc.final_cost = round.final_cost;
                acc.final_skipped_edges = round.final_skipped_edges;
                acc.cost_history.extend(round.cost_history);
                acc.termination = round.termination;
                acc.rounds += 1;
                acc
            }
        };
        let rounds = total.rounds;
        report = Some(total);
        let Some(threshold) = opts.outlier_threshold_px else { break };
        if rounds >= opts.max_rounds {
            break;
        }
        let kept: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&n| edge_residual(&graph.edges[n], depths[n], &rig, intrinsics).is_ok_and(|r| r.norm() <= threshold))
            .collect();
        if kept.is_empty() || (kept.len() == active.len() && !(first && screening)) {
            break;
        }
        let trial = CorrespondenceGraph {
            edges: kept.iter().map(|&n| graph.edges[n].clone()).collect(),
            n_timestamps: graph.n_timestamps,
            n_cameras: graph.n_cameras,
        };
        if check_observed(&trial, &layout).is_err() {
            break;
        }
        debug!("round {rounds}: dropping {} outlier edges", active.len() - kept.len());
        active = kept;
    }
    let mut report = report.expect("at least one round ran");
    report.rejected_edges = graph.len() - active.len();
    Ok(Solution { rig, depths, report })
}

/// Levenberg–Marquardt on one fixed edge set, starting from the edge depths.
fn run_lm(
    graph: &CorrespondenceGraph,
    init: &RigState,
    intrinsics: &[Intrinsics],
    layout: &Layout,
    opts: &SolverOptions,
) -> Result<(RigState, Vec<f64>, SolveReport), PoseRefineError> {
    let loss = opts.loss();
    let mut rig = init.clone();
    let mut depths: Vec<f64> = graph.edges.iter().map(|e| e.depth_q).collect();
    let initial: CostSummary = cost_with_depths(graph, &depths, &rig, intrinsics, loss)?;
    if initial.evaluated == 0 {
        return Err(PoseRefineError::EmptyGraph);
    }
    let mut current = initial;
    let mut report = SolveReport {
        iterations: 0,
        accepted_steps: 0,
        rejected_steps: 0,
        initial_cost: initial.cost,
        final_cost: initial.cost,
        initial_skipped_edges: initial.skipped,
        final_skipped_edges: initial.skipped,
        cost_history: vec![initial.cost],
        termination: Termination::MaxIterations,
        rounds: 1,
        rejected_edges: 0,
    };
    if initial.cost <= opts.cost_floor {
        report.termination = Termination::AlreadyOptimal;
        return Ok((rig, depths, report));
    }

    let depth_scale = match (&opts.gauge.fixed_egos[..], &opts.gauge.fixed_deltas[..]) {
        ([ego], [cam]) if opts.optimize_point_depths && opts.gauge.hold_depth_scale => {
            Some((*ego, *cam, median_log(&depths)))
        }
        _ => None,
    };
    let mut lambda = opts.initial_damping;
    'outer: for iter in 0..opts.max_iters {
        report.iterations = iter + 1;
        let ne = build_normal_equations(graph, &depths, &rig, intrinsics, layout, loss, opts.optimize_point_depths)?;
        loop {
            let candidate = damped_step(&ne, lambda)
                .map(|(dp, dr)| apply_step(&rig, &depths, layout, &dp, &dr))
                .map(|(mut r, mut d)| {
                    if let Some((ego, cam, target)) = depth_scale {
                        normalize_scale(&mut r, &mut d, ego, cam, target);
                    }
                    let c = cost_with_depths(graph, &d, &r, intrinsics, loss);
                    (r, d, c)
                });
            let accepted = match candidate {
                Some((r, d, Ok(c))) if c.cost.is_finite() && c.cost < current.cost && c.skipped <= current.skipped => {
                    Some((r, d, c))
                }
                Some((_, _, Err(e))) => return Err(e),
                _ => None,
            };
            match accepted {
                Some((r, d, c)) => {
                    let rel = (current.cost - c.cost) / current.cost;
                    rig = r;
                    depths = d;
                    current = c;
                    report.accepted_steps += 1;
                    report.cost_history.push(c.cost);
                    lambda = (lambda / opts.damping_down).max(1e-15);
                    debug!("iter {iter}: cost {:.6e} (rel decrease {rel:.3e}, lambda {lambda:.1e})", c.cost);
                    if c.cost <= opts.cost_floor {
                        report.termination = Termination::CostFloor;
                        break 'outer;
                    }
                    if rel < opts.convergence_tol {
                        report.termination = Termination::RelativeDecrease;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    report.rejected_steps += 1;
                    lambda *= opts.damping_up;
                    if lambda > opts.max_damping {
                        if report.accepted_steps == 0 {
                            return Err(PoseRefineError::Diverged { damping: lambda });
                        }
                        report.termination = Termination::Stalled;
                        break 'outer;
                    }
                }
            }
        }
    }
    report.final_cost = current.cost;
    report.final_skipped_edges = current.skipped;
    Ok((rig, depths, report))
}
