//! Layered radiance fields for under-calibrated multi-camera rigs.
//!
//! The crate covers the full desk-scale pipeline: synthetic rig scenes with
//! per-camera color distortions ([`scenegen`]), rig-constrained bundle
//! adjustment ([`pose_refine`]), depth-based virtual view synthesis
//! ([`warp`]), a differentiable foreground/sky voxel field with per-image
//! affine color correction ([`radiance`]), the training loop ([`trainer`]) and
//! evaluation ([`eval`]).

pub mod geometry;
pub mod pose_refine;
pub mod raster;
pub mod warp;
pub mod radiance;
pub mod dataset;
pub mod scenegen;
pub mod trainer;
pub mod eval;
