use nalgebra::Vector3;
use rayon::prelude::*;

use super::correction::{Affine, ColorCorrection, Layer, MlpTrace, CODE_DIM};
use super::field::{LayeredRadianceField, Ray, RayTrace};
use super::loss::{corrected_pixel, corrected_pixel_backward, sky_loss, sky_loss_grad, total_loss, transform_reg, LossWeights};
use super::RadianceError;

/// Rays are split into this many contiguous shards, each with its own
/// gradient buffers, reduced in shard order. Keeping the count fixed makes
/// the summation order independent of the thread count.
pub const GRAD_SHARDS: usize = 4;

/// One supervised ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub target: Vector3<f64>,
    pub sky: bool,
    /// Image whose correction codes apply.
    pub code_ref: usize,
    /// Sample offset within each depth bin, in `[0, 1)`.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Grid,
    Sky,
    Codes,
    Decoder,
}

/// The trainable scene: field plus optional per-image color correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub field: LayeredRadianceField,
    pub correction: Option<ColorCorrection>,
}

/// Gradient buffers laid out like [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub groups: Vec<(ParamGroup, Vec<f64>)>,
}

impl ModelGrad {
    pub fn fg(&self) -> &[f64] {
        &self.groups[0].1
    }

    pub fn sky(&self) -> &[f64] {
        &self.groups[1].1
    }

    pub fn max_abs(&self) -> f64 {
        self.groups.iter().flat_map(|(_, g)| g.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Model {
    /// Parameter tensors in a fixed order: fg grid, sky map, then fg codes,
    /// sky codes and decoders when correction is enabled.
    pub fn params(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> =
            vec![(ParamGroup::Grid, &self.field.fg.values), (ParamGroup::Sky, &self.field.sky.values)];
        if let Some(cc) = &self.correction {
            out.push((ParamGroup::Codes, &cc.fg_codes));
            out.push((ParamGroup::Codes, &cc.sky_codes));
            for d in &cc.decoders {
                out.push((ParamGroup::Decoder, &d.params));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> =
            vec![(ParamGroup::Grid, &mut self.field.fg.values), (ParamGroup::Sky, &mut self.field.sky.values)];
        if let Some(cc) = &mut self.correction {
            out.push((ParamGroup::Codes, &mut cc.fg_codes));
            out.push((ParamGroup::Codes, &mut cc.sky_codes));
            for d in &mut cc.decoders {
                out.push((ParamGroup::Decoder, &mut d.params));
            }
        }
        out
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad { groups: self.params().into_iter().map(|(g, p)| (g, vec![0.0; p.len()])).collect() }
    }

    /// Corrected color of one ray with bin-centre samples.
    pub fn render(&self, ray: &Ray, n_samples: usize, transforms: &(Affine, Affine)) -> Result<Vector3<f64>, RadianceError> {
        let out = self.field.render_ray(ray, n_samples)?;
        Ok(corrected_pixel(&out.fg, out.opacity, &out.sky, &transforms.0, &transforms.1))
    }

    /// Foreground and sky transforms for `code_ref`; identity when
    /// correction is disabled or `code_ref` is `None`.
    pub fn transforms(&self, code_ref: Option<usize>) -> Result<(Affine, Affine), RadianceError> {
        match (&self.correction, code_ref) {
            (Some(cc), Some(id)) => Ok((cc.decode(id, Layer::Foreground)?, cc.decode(id, Layer::Sky)?)),
            _ => Ok((Affine::identity(), Affine::identity())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub n_samples: usize,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub pho: f64,
    pub sky: f64,
    pub reg: f64,
    pub total: f64,
}

/// Correction state of one image appearing in the batch.
struct SlotState {
    image_id: usize,
    slot: usize,
    fg: (Affine, Option<MlpTrace>),
    sky: (Affine, Option<MlpTrace>),
}

struct ShardOutput {
    pho: f64,
    sky: f64,
    fg: Vec<f64>,
    sky_map: Vec<f64>,
    /// Per batch slot: gradients of the fg and sky transforms.
    tf: Vec<(Affine, Affine)>,
}

/// Batch loss and its gradient with respect to every model parameter.
///
/// The whole objective is a sum over rays plus one regularizer per image
/// present in the batch, divided by the number of rays.
pub fn loss_and_grad(
    model: &Model,
    rays: &[TrainRay],
    opts: &ObjectiveOptions,
) -> Result<(LossBreakdown, ModelGrad), RadianceError> {
    if rays.is_empty() {
        return Err(RadianceError::ShapeMismatch("empty ray batch".into()));
    }
    let b = rays.len() as f64;
    let mut ids: Vec<usize> = rays.iter().map(|r| r.code_ref).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut slots = Vec::with_capacity(ids.len());
    for &image_id in &ids {
        let state = match &model.correction {
            Some(cc) => {
                let slot = cc.slot(image_id)?;
                let (fg, fg_trace) = cc.decode_slot(slot, Layer::Foreground);
                let (sky, sky_trace) = cc.decode_slot(slot, Layer::Sky);
                SlotState { image_id, slot, fg: (fg, Some(fg_trace)), sky: (sky, Some(sky_trace)) }
            }
            None => SlotState {
                image_id,
                slot: 0,
                fg: (Affine::identity(), None),
                sky: (Affine::identity(), None),
            },
        };
        slots.push(state);
    }
    let slot_of = |id: usize| ids.binary_search(&id).expect("id collected above");

    let field = &model.field;
    let shard_len = rays.len().div_ceil(GRAD_SHARDS);
    let shards: Vec<ShardOutput> = rays
        .par_chunks(shard_len)
        .map(|chunk| {
            let mut out = ShardOutput {
                pho: 0.0,
                sky: 0.0,
                fg: vec![0.0; field.fg.values.len()],
                sky_map: vec![0.0; field.sky.values.len()],
                tf: vec![(Affine::zero(), Affine::zero()); slots.len()],
            };
            let mut trace = RayTrace::default();
            for r in chunk {
                let s = slot_of(r.code_ref);
                let (fg_tf, sky_tf) = (&slots[s].fg.0, &slots[s].sky.0);
                let rendered = field.render_traced(&r.ray, opts.n_samples, r.jitter, &mut trace)?;
                let pred = corrected_pixel(&rendered.fg, rendered.opacity, &rendered.sky, fg_tf, sky_tf);
                let err = pred - r.target;
                out.pho += err.norm_squared();
                out.sky += sky_loss(rendered.opacity, r.sky);
                let g = corrected_pixel_backward(
                    &rendered.fg,
                    rendered.opacity,
                    &rendered.sky,
                    fg_tf,
                    sky_tf,
                    &(err * (2.0 / b)),
                );
                let d_opacity = g.opacity + opts.weights.sky / b * sky_loss_grad(rendered.opacity, r.sky);
                field.backward_ray(&trace, &g.fg, d_opacity, &g.sky, &mut out.fg, &mut out.sky_map);
                out.tf[s].0.add_scaled(&g.fg_tf, 1.0);
                out.tf[s].1.add_scaled(&g.sky_tf, 1.0);
            }
            Ok(out)
        })
        .collect::<Result<_, RadianceError>>()?;

    let mut grad = model.zero_grad();
    let mut pho = 0.0;
    let mut sky = 0.0;
    let mut tf_grad = vec![(Affine::zero(), Affine::zero()); slots.len()];
    for shard in shards {
        pho += shard.pho;
        sky += shard.sky;
        for (g, s) in grad.groups[0].1.iter_mut().zip(&shard.fg) {
            *g += s;
        }
        for (g, s) in grad.groups[1].1.iter_mut().zip(&shard.sky_map) {
            *g += s;
        }
        for (acc, s) in tf_grad.iter_mut().zip(&shard.tf) {
            acc.0.add_scaled(&s.0, 1.0);
            acc.1.add_scaled(&s.1, 1.0);
        }
    }
    let pho = pho / b;
    let sky = sky / b;

    let mut reg = 0.0;
    if let Some(cc) = &model.correction {
        for (state, tf) in slots.iter().zip(tf_grad.iter_mut()) {
            let share = 1.0 / b;
            reg += share * transform_reg(&state.fg.0, &state.sky.0);
            tf.0.add_scaled(&state.fg.0.deviation_l1_grad(), opts.weights.reg * share);
            tf.1.add_scaled(&state.sky.0.deviation_l1_grad(), opts.weights.reg * share);
            for (layer, d_tf, trace) in
                [(Layer::Foreground, &tf.0, &state.fg.1), (Layer::Sky, &tf.1, &state.sky.1)]
            {
                let trace = trace.as_ref().expect("traced when correction is enabled");
                let dec = cc.decoder_index(layer);
                let d_code = {
                    let (_, g) = &mut grad.groups[4 + dec];
                    cc.decoders[dec].backward(trace, &d_tf.to_output_layout(), g)
                };
                let table = if layer == Layer::Foreground { 2 } else { 3 };
                let codes = &mut grad.groups[table].1[state.slot * CODE_DIM..(state.slot + 1) * CODE_DIM];
                for (c, d) in codes.iter_mut().zip(d_code) {
                    *c += d;
                }
            }
            debug_assert_eq!(cc.slot(state.image_id).ok(), Some(state.slot));
        }
    }
    let total = total_loss(pho, sky, reg, opts.weights)?;
    Ok((LossBreakdown { pho, sky, reg, total }, grad))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::radiance::field::{Aabb, SkyMap, VoxelGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_model(rng: &mut ChaCha8Rng, shared: bool) -> Model {
        let bounds = Aabb::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        let mut fg = VoxelGrid::new([8; 3], bounds, 0.0, 0.0).unwrap();
        for v in fg.values.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let mut sky = SkyMap::new(8, 4, 0.0).unwrap();
        for v in sky.values.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let mut cc = ColorCorrection::new(&[0, 1, 2], &[12, 12, 12], shared, 0.5, rng).unwrap();
        for d in cc.decoders.iter_mut() {
            let r = d.output_layer_range();
            for p in &mut d.params[r] {
                *p = rng.random_range(-0.1..0.1);
            }
        }
        Model { field: LayeredRadianceField { fg, sky }, correction: Some(cc) }
    }

    pub(crate) fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<TrainRay> {
        (0..n)
            .map(|i| {
                let origin = Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), -0.5);
                let target = Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 1.2);
                TrainRay {
                    ray: Ray::new(origin, target - origin, 0.1, 4.0).unwrap(),
                    target: Vector3::new(rng.random(), rng.random(), rng.random()),
                    sky: i % 3 == 0,
                    code_ref: i % 3,
                    jitter: rng.random(),
                }
            })
            .collect()
    }

    fn opts() -> ObjectiveOptions {
        ObjectiveOptions { n_samples: 16, weights: LossWeights { sky: 0.3, reg: 0.2 } }
    }

    fn check_all(model: &Model, rays: &[TrainRay], stride: usize) {
        let (_, grad) = loss_and_grad(model, rays, &opts()).unwrap();
        let h = 1e-4;
        let n_groups = model.params().len();
        for group in 0..n_groups {
            let len = model.params()[group].1.len();
            for idx in (0..len).step_by(stride) {
                let mut plus = model.clone();
                plus.params_mut()[group].1[idx] += h;
                let mut minus = model.clone();
                minus.params_mut()[group].1[idx] -= h;
                let fp = loss_and_grad(&plus, rays, &opts()).unwrap().0.total;
                let fm = loss_and_grad(&minus, rays, &opts()).unwrap().0.total;
                let fd = (fp - fm) / (2.0 * h);
                let an = grad.groups[group].1[idx];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-9,
                    "group {group} index {idx}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_model(&mut rng, false);
        let rays = random_rays(&mut rng, 16);
        check_all(&model, &rays, 7);
    }

    #[test]
    fn shared_decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = random_model(&mut rng, true);
        let rays = random_rays(&mut rng, 9);
        check_all(&model, &rays, 13);
    }

    #[test]
    fn zero_field_and_targets_have_no_color_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = random_model(&mut rng, false);
        model.correction = None;
        for node in model.field.fg.values.chunks_exact_mut(4) {
            node[0] = -200.0;
        }
        for v in model.field.sky.values.iter_mut() {
            *v = -200.0;
        }
        let mut rays = random_rays(&mut rng, 8);
        for r in rays.iter_mut() {
            r.target = Vector3::zeros();
        }
        let o = ObjectiveOptions { n_samples: 8, weights: LossWeights { sky: 0.0, reg: 0.0 } };
        let (loss, grad) = loss_and_grad(&model, &rays, &o).unwrap();
        assert!(loss.pho < 1e-100);
        for node in grad.fg().chunks_exact(4) {
            assert!(node[1..].iter().all(|g| g.abs() < 1e-100));
        }
    }

    #[test]
    fn loss_parts_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = random_model(&mut rng, false);
        let rays = random_rays(&mut rng, 12);
        let (loss, _) = loss_and_grad(&model, &rays, &opts()).unwrap();
        let mut pho = 0.0;
        let mut reg = 0.0;
        for r in &rays {
            let out = model.field.render_traced(&r.ray, 16, r.jitter, &mut RayTrace::default()).unwrap();
            let (a, c) = model.transforms(Some(r.code_ref)).unwrap();
            pho += (corrected_pixel(&out.fg, out.opacity, &out.sky, &a, &c) - r.target).norm_squared();
        }
        let mut ids: Vec<usize> = rays.iter().map(|r| r.code_ref).collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let (a, c) = model.transforms(Some(id)).unwrap();
            reg += transform_reg(&a, &c);
        }
        assert!((loss.pho - pho / 12.0).abs() < 1e-12);
        assert!((loss.reg - reg / 12.0).abs() < 1e-12);
        assert!(matches!(loss_and_grad(&model, &[], &opts()), Err(RadianceError::ShapeMismatch(_))));
    }
}
