use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Vector2};
use rayon::prelude::*;

use super::{CorrespondenceEdge, CorrespondenceGraph, PoseRefineError};
use crate::geometry::{project, skew, unproject, Intrinsics, RigState};

/// Edges per parallel work unit. Fixed so reductions are reproducible
/// regardless of thread count.
pub(crate) const EDGE_CHUNK: usize = 1024;

/// Optimizable parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    Ego(usize),
    Delta(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    /// `½‖r‖²`.
    Squared,
    /// `½‖r‖²` inside `delta`, linear outside.
    Huber { delta: f64 },
}

impl RobustLoss {
    pub fn cost(&self, norm: f64) -> f64 {
        match *self {
            RobustLoss::Squared => 0.5 * norm * norm,
            RobustLoss::Huber { delta } => huber(norm, delta),
        }
    }

    /// IRLS weight `ρ'(s)/s` at residual norm `s`.
    pub fn irls_weight(&self, norm: f64) -> f64 {
        match *self {
            RobustLoss::Squared => 1.0,
            RobustLoss::Huber { delta } => {
                if norm <= delta {
                    1.0
                } else {
                    delta / norm
                }
            }
        }
    }
}

pub fn huber(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        0.5 * norm * norm
    } else {
        delta * (norm - 0.5 * delta)
    }
}

/// Residual and Jacobians of one edge with respect to left increments
/// `(ω, v)` of the four pose blocks it touches and its inverse depth.
#[derive(Debug, Clone)]
pub struct EdgeLinearization {
    pub residual: Vector2<f64>,
    /// Source ego, source delta, destination ego, destination delta. Blocks
    /// may repeat; their contributions add.
    pub blocks: [(ParamBlock, Matrix2x6<f64>); 4],
    pub d_inv_depth: Vector2<f64>,
}

fn check_indices(edge: &CorrespondenceEdge, rig: &RigState, intrinsics: &[Intrinsics]) -> Result<(), PoseRefineError> {
    for v in [edge.src, edge.dst] {
        rig.camera_pose(v.timestamp, v.camera)?;
        if v.camera >= intrinsics.len() {
            return Err(PoseRefineError::InvalidEdge { index: 0, reason: format!("no intrinsics for camera {}", v.camera) });
        }
    }
    Ok(())
}

/// `p − Π_l((T^j ΔT_l)⁻¹ T^i ΔT_k Π_k⁻¹(q, depth))` in pixels.
pub fn edge_residual(
    edge: &CorrespondenceEdge,
    depth: f64,
    rig: &RigState,
    intrinsics: &[Intrinsics],
) -> Result<Vector2<f64>, PoseRefineError> {
    check_indices(edge, rig, intrinsics)?;
    let src = rig.camera_pose(edge.src.timestamp, edge.src.camera)?;
    let dst = rig.camera_pose(edge.dst.timestamp, edge.dst.camera)?;
    let x_src = unproject(&intrinsics[edge.src.camera], &edge.q, depth)?;
    let x_dst = dst.inverse().transform_point(&src.transform_point(&x_src));
    if !(x_dst.z > 0.0) {
        return Err(PoseRefineError::PointBehindCamera(x_dst.z));
    }
    Ok(edge.p - project(&intrinsics[edge.dst.camera], &x_dst)?)
}

pub fn reprojection_residual(
    edge: &CorrespondenceEdge,
    rig: &RigState,
    intrinsics: &[Intrinsics],
) -> Result<Vector2<f64>, PoseRefineError> {
    edge_residual(edge, edge.depth_q, rig, intrinsics)
}

pub fn linearize_edge(
    edge: &CorrespondenceEdge,
    depth: f64,
    rig: &RigState,
    intrinsics: &[Intrinsics],
) -> Result<EdgeLinearization, PoseRefineError> {
    check_indices(edge, rig, intrinsics)?;
    let (i, k, j, l) = (edge.src.timestamp, edge.src.camera, edge.dst.timestamp, edge.dst.camera);
    let ego_i = &rig.ego_poses[i];
    let delta_k = &rig.deltas[k];
    let ego_j = &rig.ego_poses[j];
    let delta_l = &rig.deltas[l];

    let x_src = unproject(&intrinsics[k], &edge.q, depth)?;
    let y = delta_k.transform_point(&x_src);
    let x_world = ego_i.transform_point(&y);
    let z = ego_j.inverse().transform_point(&x_world);
    let x_dst = delta_l.inverse().transform_point(&z);
    if !(x_dst.z > 0.0) {
        return Err(PoseRefineError::PointBehindCamera(x_dst.z));
    }
    let kd = &intrinsics[l];
    let pixel = project(kd, &x_dst)?;
    let residual = edge.p - pixel;

    let inv_z = 1.0 / x_dst.z;
    let d_pix = Matrix2x3::new(
        kd.fx * inv_z,
        0.0,
        -kd.fx * x_dst.x * inv_z * inv_z,
        0.0,
        kd.fy * inv_z,
        -kd.fy * x_dst.y * inv_z * inv_z,
    );
    // r = p − π(X_dst), so every Jacobian carries a minus sign.
    let d_res = -d_pix;

    let r_dl_t = delta_l.rotation_matrix().transpose();
    let r_ej_t = ego_j.rotation_matrix().transpose();
    let r_ei = ego_i.rotation_matrix();
    let r_dk = delta_k.rotation_matrix();
    let world_to_dst = r_dl_t * r_ej_t;

    let block = |rot_part: Matrix3<f64>, trans_part: Matrix3<f64>| {
        let mut m = Matrix2x6::zeros();
        m.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_res * rot_part));
        m.fixed_view_mut::<2, 3>(0, 3).copy_from(&(d_res * trans_part));
        m
    };

    // Source ego: X_w ← ω × X_w + v.
    let j_ego_i = block(world_to_dst * -skew(&x_world), world_to_dst);
    // Source delta: Y ← ω × Y + v, then rotated into the world by R^i.
    let m_k = world_to_dst * r_ei;
    let j_delta_k = block(m_k * -skew(&y), m_k);
    // Destination ego: Z = (T^j)⁻¹ exp(−ξ) X_w.
    let j_ego_j = block(world_to_dst * skew(&x_world), -world_to_dst);
    // Destination delta: X_dst = ΔT_l⁻¹ exp(−ξ) Z.
    let j_delta_l = block(r_dl_t * skew(&z), -r_dl_t);
    // Inverse depth ρ = 1/d: ∂X_src/∂ρ = −d · X_src.
    let src_to_dst = m_k * r_dk;
    let d_inv_depth = d_res * (src_to_dst * (-depth * x_src));

    Ok(EdgeLinearization {
        residual,
        blocks: [
            (ParamBlock::Ego(i), j_ego_i),
            (ParamBlock::Delta(k), j_delta_k),
            (ParamBlock::Ego(j), j_ego_j),
            (ParamBlock::Delta(l), j_delta_l),
        ],
        d_inv_depth,
    })
}

/// Robust reprojection cost of a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSummary {
    pub cost: f64,
    pub evaluated: usize,
    /// Edges whose point landed behind the destination camera.
    pub skipped: usize,
}

/// `Σ weight · ρ(‖r‖)` over edges, skipping points behind the destination camera.
pub fn total_cost(
    graph: &CorrespondenceGraph,
    rig: &RigState,
    intrinsics: &[Intrinsics],
    loss: RobustLoss,
) -> Result<CostSummary, PoseRefineError> {
    let depths: Vec<f64> = graph.edges.iter().map(|e| e.depth_q).collect();
    cost_with_depths(graph, &depths, rig, intrinsics, loss)
}

pub(crate) fn cost_with_depths(
    graph: &CorrespondenceGraph,
    depths: &[f64],
    rig: &RigState,
    intrinsics: &[Intrinsics],
    loss: RobustLoss,
) -> Result<CostSummary, PoseRefineError> {
    if graph.is_empty() {
        return Err(PoseRefineError::EmptyGraph);
    }
    let partials: Vec<Result<CostSummary, PoseRefineError>> = graph
        .edges
        .par_chunks(EDGE_CHUNK)
        .zip(depths.par_chunks(EDGE_CHUNK))
        .map(|(edges, depths)| {
            let mut acc = CostSummary { cost: 0.0, evaluated: 0, skipped: 0 };
            for (e, &d) in edges.iter().zip(depths) {
                match edge_residual(e, d, rig, intrinsics) {
                    Ok(r) => {
                        acc.cost += e.weight * loss.cost(r.norm());
                        acc.evaluated += 1;
                    }
                    Err(PoseRefineError::PointBehindCamera(_)) | Err(PoseRefineError::Geometry(_)) => acc.skipped += 1,
                    Err(other) => return Err(other),
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = CostSummary { cost: 0.0, evaluated: 0, skipped: 0 };
    for p in partials {
        let p = p?;
        total.cost += p.cost;
        total.evaluated += p.evaluated;
        total.skipped += p.skipped;
    }
    Ok(total)
}
