use nalgebra::Vector3;

use super::correction::{Affine, ColorCorrection, Layer};
use super::RadianceError;

/// Opacity clamp used by the sky loss.
pub const SKY_EPS: f64 = 1e-5;

/// `fg + (1 − o)·sky`.
pub fn composite(fg: &Vector3<f64>, opacity: f64, sky: &Vector3<f64>) -> Vector3<f64> {
    fg + sky * (1.0 - opacity)
}

/// `A·fg + x + (1 − o)(C·sky + y)`, unclamped.
pub fn corrected_pixel(fg: &Vector3<f64>, opacity: f64, sky: &Vector3<f64>, fg_tf: &Affine, sky_tf: &Affine) -> Vector3<f64> {
    fg_tf.apply(fg) + sky_tf.apply(sky) * (1.0 - opacity)
}

/// Gradients of a scalar through [`corrected_pixel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedPixelGrad {
    pub fg: Vector3<f64>,
    pub opacity: f64,
    pub sky: Vector3<f64>,
    pub fg_tf: Affine,
    pub sky_tf: Affine,
}

pub fn corrected_pixel_backward(
    fg: &Vector3<f64>,
    opacity: f64,
    sky: &Vector3<f64>,
    fg_tf: &Affine,
    sky_tf: &Affine,
    upstream: &Vector3<f64>,
) -> CorrectedPixelGrad {
    let keep = 1.0 - opacity;
    CorrectedPixelGrad {
        fg: fg_tf.matrix.transpose() * upstream,
        opacity: -upstream.dot(&sky_tf.apply(sky)),
        sky: sky_tf.matrix.transpose() * upstream * keep,
        fg_tf: Affine { matrix: upstream * fg.transpose(), offset: *upstream },
        sky_tf: Affine { matrix: upstream * sky.transpose() * keep, offset: upstream * keep },
    }
}

/// Binary cross-entropy pushing opacity to 0 on sky pixels and to 1 elsewhere.
pub fn sky_loss(opacity: f64, is_sky: bool) -> f64 {
    let o = opacity.clamp(SKY_EPS, 1.0 - SKY_EPS);
    if is_sky {
        -(1.0 - o).ln()
    } else {
        -o.ln()
    }
}

/// Derivative of [`sky_loss`] in opacity; zero where the clamp is active.
pub fn sky_loss_grad(opacity: f64, is_sky: bool) -> f64 {
    if !(SKY_EPS..=1.0 - SKY_EPS).contains(&opacity) {
        return 0.0;
    }
    if is_sky {
        1.0 / (1.0 - opacity)
    } else {
        -1.0 / opacity
    }
}

/// L1 deviation of both transforms from identity.
pub fn transform_reg(fg_tf: &Affine, sky_tf: &Affine) -> f64 {
    fg_tf.deviation_l1() + sky_tf.deviation_l1()
}

pub fn reg_loss(cc: &ColorCorrection, image_id: usize) -> Result<f64, RadianceError> {
    Ok(transform_reg(&cc.decode(image_id, Layer::Foreground)?, &cc.decode(image_id, Layer::Sky)?))
}

/// Batch mean of squared color errors.
pub fn photometric_loss(rendered: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<f64, RadianceError> {
    if rendered.len() != target.len() {
        return Err(RadianceError::ShapeMismatch(format!("{} rendered vs {} targets", rendered.len(), target.len())));
    }
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered.iter().zip(target).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(sum / rendered.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sky: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sky: 2e-3, reg: 2e-3 }
    }
}

/// `pho + λ·sky + γ·reg`.
pub fn total_loss(pho: f64, sky: f64, reg: f64, weights: LossWeights) -> Result<f64, RadianceError> {
    let total = pho + weights.sky * sky + weights.reg * reg;
    if !total.is_finite() {
        return Err(RadianceError::NonFiniteLoss(total));
    }
    Ok(total)
}
