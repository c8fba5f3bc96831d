//! Rig-constrained bundle adjustment.
//!
//! Every camera pose is `T^i ∘ ΔT_k`: a per-timestamp ego pose composed with
//! a per-camera offset that does not change over time. Correspondences
//! between any two (timestamp, camera) views constrain both the ego
//! trajectory and the offsets; the solver is Levenberg–Marquardt over dense
//! pose blocks with per-edge inverse depths eliminated by a Schur complement.

mod observability;
mod residual;
mod solver;

pub use observability::{observability_report, ObservabilityReport, TranslationBlockReport, UNCONSTRAINED_NORM};
pub use residual::{
    edge_residual, huber, linearize_edge, reprojection_residual, total_cost, CostSummary, EdgeLinearization,
    ParamBlock, RobustLoss,
};
pub use solver::{solve, Gauge, SolveReport, Solution, SolverOptions, Termination};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum PoseRefineError {
    #[error("correspondence graph has no usable edges")]
    EmptyGraph,
    #[error("transformed point lies behind the destination camera (depth {0})")]
    PointBehindCamera(f64),
    #[error("invalid edge {index}: {reason}")]
    InvalidEdge { index: usize, reason: String },
    #[error("parameter block {0:?} is not observed by any edge")]
    Unobserved(ParamBlock),
    #[error("solver diverged: damping reached {damping:e} without an accepted step")]
    Diverged { damping: f64 },
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("graph parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A (timestamp, camera) image index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewId {
    pub timestamp: usize,
    pub camera: usize,
}

impl ViewId {
    pub fn new(timestamp: usize, camera: usize) -> Self {
        Self { timestamp, camera }
    }
}

/// One pixel match: `q` in `src` with scene depth `depth_q`, observed at `p` in `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceEdge {
    pub src: ViewId,
    pub dst: ViewId,
    pub q: Vector2<f64>,
    pub p: Vector2<f64>,
    pub depth_q: f64,
    pub weight: f64,
}

/// Flat on-disk edge record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub i: usize,
    pub k: usize,
    pub j: usize,
    pub l: usize,
    pub qx: f64,
    pub qy: f64,
    pub px: f64,
    pub py: f64,
    pub depth_q: f64,
    pub weight: f64,
}

impl From<&CorrespondenceEdge> for EdgeRecord {
    fn from(e: &CorrespondenceEdge) -> Self {
        Self {
            i: e.src.timestamp,
            k: e.src.camera,
            j: e.dst.timestamp,
            l: e.dst.camera,
            qx: e.q.x,
            qy: e.q.y,
            px: e.p.x,
            py: e.p.y,
            depth_q: e.depth_q,
            weight: e.weight,
        }
    }
}

impl From<&EdgeRecord> for CorrespondenceEdge {
    fn from(r: &EdgeRecord) -> Self {
        Self {
            src: ViewId::new(r.i, r.k),
            dst: ViewId::new(r.j, r.l),
            q: Vector2::new(r.qx, r.qy),
            p: Vector2::new(r.px, r.py),
            depth_q: r.depth_q,
            weight: r.weight,
        }
    }
}

/// The measurement set for bundle adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceGraph {
    pub edges: Vec<CorrespondenceEdge>,
    pub n_timestamps: usize,
    pub n_cameras: usize,
}

impl CorrespondenceGraph {
    pub fn new(edges: Vec<CorrespondenceEdge>, n_timestamps: usize, n_cameras: usize) -> Result<Self, PoseRefineError> {
        let g = Self { edges, n_timestamps, n_cameras };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), PoseRefineError> {
        for (index, e) in self.edges.iter().enumerate() {
            let invalid = |reason: String| PoseRefineError::InvalidEdge { index, reason };
            for v in [e.src, e.dst] {
                if v.timestamp >= self.n_timestamps || v.camera >= self.n_cameras {
                    return Err(invalid(format!("view {:?} out of range", v)));
                }
            }
            if e.src == e.dst {
                return Err(invalid("source and destination are the same view".into()));
            }
            if !(e.depth_q > 0.0 && e.depth_q.is_finite()) {
                return Err(invalid(format!("depth {} must be positive", e.depth_q)));
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(invalid(format!("weight {} must be non-negative", e.weight)));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    /// Line-delimited JSON, one edge record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&serde_json::to_string(&EdgeRecord::from(e)).expect("edge serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, n_timestamps: usize, n_cameras: usize) -> Result<Self, PoseRefineError> {
        let mut edges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let rec: EdgeRecord =
                serde_json::from_str(line).map_err(|e| PoseRefineError::Parse { line: n + 1, reason: e.to_string() })?;
            edges.push(CorrespondenceEdge::from(&rec));
        }
        Self::new(edges, n_timestamps, n_cameras)
    }

    /// Subgraph with only the edges accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&CorrespondenceEdge) -> bool) -> Self {
        Self {
            edges: self.edges.iter().filter(|e| keep(e)).cloned().collect(),
            n_timestamps: self.n_timestamps,
            n_cameras: self.n_cameras,
        }
    }
}
