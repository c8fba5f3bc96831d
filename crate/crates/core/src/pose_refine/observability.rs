use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, SymmetricEigen};
use serde::Serialize;

use super::residual::{linearize_edge, ParamBlock};
use super::{CorrespondenceGraph, PoseRefineError};
use crate::geometry::{Intrinsics, RigState};

/// Translation blocks whose Jacobian norm falls below this are reported as
/// unconstrained.
pub const UNCONSTRAINED_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct TranslationBlockReport {
    pub camera: usize,
    /// Norms of the three `Δt_k` columns of the stacked residual Jacobian.
    pub column_norms: [f64; 3],
    /// Frobenius norm of the three columns together.
    pub block_norm: f64,
    /// Smallest singular value of the block's 3×3 Gauss–Newton matrix.
    pub min_singular_value: f64,
    pub unconstrained: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservabilityReport {
    pub translation_blocks: Vec<TranslationBlockReport>,
    pub skipped_edges: usize,
}

impl ObservabilityReport {
    pub fn flagged(&self) -> impl Iterator<Item = &TranslationBlockReport> {
        self.translation_blocks.iter().filter(|b| b.unconstrained)
    }
}

/// How well each camera offset translation `Δt_k` is constrained by the graph.
///
/// For matches within a single camera under purely translational ego motion
/// the relative transform between the two views does not depend on `Δt_k`,
/// so its Jacobian columns vanish; cross-camera matches or rotating motion
/// restore them.
pub fn observability_report(
    graph: &CorrespondenceGraph,
    rig: &RigState,
    intrinsics: &[Intrinsics],
) -> Result<ObservabilityReport, PoseRefineError> {
    if graph.is_empty() {
        return Err(PoseRefineError::EmptyGraph);
    }
    let n = rig.n_cameras();
    let mut gram = vec![Matrix3::<f64>::zeros(); n];
    let mut skipped = 0;
    for edge in &graph.edges {
        let lin = match linearize_edge(edge, edge.depth_q, rig, intrinsics) {
            Ok(lin) => lin,
            Err(PoseRefineError::PointBehindCamera(_)) | Err(PoseRefineError::Geometry(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let sw = edge.weight.sqrt();
        // Sum the contributions of every occurrence of each delta block in this edge.
        for k in 0..n {
            let mut jk = Matrix2x3::<f64>::zeros();
            let mut touched = false;
            for (b, j) in lin.blocks.iter() {
                if *b == ParamBlock::Delta(k) {
                    let j: &Matrix2x6<f64> = j;
                    jk += j.fixed_view::<2, 3>(0, 3) * sw;
                    touched = true;
                }
            }
            if touched {
                gram[k] += jk.transpose() * jk;
            }
        }
    }
    let translation_blocks = gram
        .iter()
        .enumerate()
        .map(|(camera, g)| {
            let column_norms = [g[(0, 0)].sqrt(), g[(1, 1)].sqrt(), g[(2, 2)].sqrt()];
            let block_norm = g.trace().max(0.0).sqrt();
            let eig = SymmetricEigen::new(*g);
            let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
            TranslationBlockReport {
                camera,
                column_norms,
                block_norm,
                min_singular_value: min_eig,
                unconstrained: block_norm < UNCONSTRAINED_NORM,
            }
        })
        .collect();
    Ok(ObservabilityReport { translation_blocks, skipped_edges: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::pose_refine::{edge_residual, reprojection_residual, CorrespondenceEdge, ViewId};
    use nalgebra::{UnitQuaternion, Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80).unwrap()
    }

    fn rig(rotating: bool) -> RigState {
        let deltas = vec![
            Pose::new(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -0.4), Vector3::new(-0.5, 0.1, 0.2)),
            Pose::new(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.4), Vector3::new(0.5, 0.0, 0.2)),
        ];
        let egos = (0..6)
            .map(|i| {
                let rot = if rotating { 0.05 * i as f64 } else { 0.0 };
                Pose::new(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), rot), Vector3::new(0.1, 0.0, 0.7 * i as f64))
            })
            .collect();
        RigState::new(egos, deltas)
    }

    fn graph(rig: &RigState, cross: bool, seed: u64) -> CorrespondenceGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ks = [k(), k()];
        let mut edges = Vec::new();
        while edges.len() < 400 {
            let cam = rng.random_range(0..2);
            let src = ViewId::new(rng.random_range(0..5), cam);
            let dst_cam = if cross { rng.random_range(0..2) } else { cam };
            let dst = ViewId::new(src.timestamp + rng.random_range(0..2), dst_cam);
            if src == dst {
                continue;
            }
            let mut e = CorrespondenceEdge {
                src,
                dst,
                q: Vector2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..80.0)),
                p: Vector2::zeros(),
                depth_q: rng.random_range(5.0..12.0),
                weight: 1.0,
            };
            let Ok(r) = reprojection_residual(&e, rig, &ks) else { continue };
            e.p = -r;
            edges.push(e);
        }
        CorrespondenceGraph::new(edges, rig.n_timestamps(), 2).unwrap()
    }

    #[test]
    fn straight_motion_with_intra_camera_edges_is_degenerate() {
        let r = rig(false);
        let rep = observability_report(&graph(&r, false, 1), &r, &[k(), k()]).unwrap();
        for b in &rep.translation_blocks {
            assert!(b.unconstrained, "{b:?}");
            assert!(b.block_norm < 1e-10);
        }
    }

    #[test]
    fn cross_camera_edges_lift_the_degeneracy() {
        let r = rig(false);
        let rep = observability_report(&graph(&r, true, 2), &r, &[k(), k()]).unwrap();
        assert_eq!(rep.flagged().count(), 0);
        for b in &rep.translation_blocks {
            assert!(b.min_singular_value > 1e-6, "{b:?}");
        }
    }

    #[test]
    fn rotating_motion_constrains_translation() {
        let r = rig(true);
        let rep = observability_report(&graph(&r, false, 3), &r, &[k(), k()]).unwrap();
        assert_eq!(rep.flagged().count(), 0);
    }

    #[test]
    fn numerical_jacobian_confirms_flags() {
        let ks = [k(), k()];
        for (rotating, cross, expect_zero) in [(false, false, true), (false, true, false), (true, false, false)] {
            let r = rig(rotating);
            let g = graph(&r, cross, 7);
            let mut total = 0.0;
            for axis in 0..3 {
                let h = 1e-6;
                for cam in 0..2 {
                    let mut plus = r.clone();
                    let mut minus = r.clone();
                    plus.deltas[cam].translation[axis] += h;
                    minus.deltas[cam].translation[axis] -= h;
                    for e in &g.edges {
                        let d = (edge_residual(e, e.depth_q, &plus, &ks).unwrap()
                            - edge_residual(e, e.depth_q, &minus, &ks).unwrap())
                            / (2.0 * h);
                        total += d.norm_squared();
                    }
                }
            }
            if expect_zero {
                assert!(total.sqrt() < 1e-6, "{}", total.sqrt());
            } else {
                assert!(total.sqrt() > 1.0);
            }
        }
    }

    #[test]
    fn empty_graph_errors() {
        let r = rig(false);
        let g = CorrespondenceGraph::new(vec![], 6, 2).unwrap();
        assert!(matches!(observability_report(&g, &r, &[k(), k()]), Err(PoseRefineError::EmptyGraph)));
    }
}
