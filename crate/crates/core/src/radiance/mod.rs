//! Differentiable layered scene model.
//!
//! A dense voxel grid holds the foreground (density and color) and an
//! equirectangular map holds the sky, which depends on ray direction only.
//! Each training image owns two latent codes that decoders turn into affine
//! color transforms, one for the foreground and one for the sky layer.
//! Every forward quantity has a hand-written backward pass.

mod checkpoint;
mod correction;
mod field;
mod loss;
mod objective;

pub use checkpoint::Checkpoint;
pub use correction::{
    decode_correction, Affine, ColorCorrection, Layer, Mlp, MlpTrace, AFFINE_PARAMS, CODE_DIM, DEFAULT_HIDDEN,
};
pub use field::{
    logit, sigmoid, softplus, Aabb, LayeredRadianceField, Ray, RaySample, RayTrace, RenderOutput, SkyMap, Taps,
    VoxelGrid, GRID_CHANNELS, SKY_CHANNELS,
};
pub use loss::{
    composite, corrected_pixel, corrected_pixel_backward, photometric_loss, reg_loss, sky_loss, sky_loss_grad,
    total_loss, transform_reg, CorrectedPixelGrad, LossWeights, SKY_EPS,
};
pub use objective::{loss_and_grad, LossBreakdown, Model, ModelGrad, ObjectiveOptions, ParamGroup, TrainRay, GRAD_SHARDS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RadianceError {
    #[error("invalid ray: {0}")]
    InvalidRay(String),
    #[error("image {0} has no correction codes")]
    UnknownImage(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
