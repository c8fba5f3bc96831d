//! Training loop: batches of real and virtual rays, Adam, metrics log.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::eval::{nearest_code, psnr, render_image, EvalError};
use crate::geometry::{unproject, GeometryError, Intrinsics, Pose, RigState};
use crate::radiance::{
    loss_and_grad, Aabb, Checkpoint, ColorCorrection, LayeredRadianceField, LossWeights, Model, ModelGrad,
    ObjectiveOptions, ParamGroup, RadianceError, Ray, SkyMap, TrainRay, VoxelGrid,
};
use crate::raster::{Bitmap, Image};
use crate::warp::{consistency_mask, generate_virtual_set, Neighbor, VirtualView, WarpError, WarpOptions, WarpSource};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step} outside [0, {n_iters}]")]
    StepOutOfRange { step: usize, n_iters: usize },
    #[error("no training images")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize, last: Box<Checkpoint> },
    #[error(transparent)]
    Radiance(#[from] RadianceError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Training and virtual-view settings, read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_iters: usize,
    pub batch_rays: usize,
    /// Real images drawn per batch.
    pub images_per_batch: usize,
    /// Real : virtual ray ratio.
    pub real_virtual_ratio: [usize; 2],
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_iters: usize,
    /// Learning-rate multipliers per parameter group.
    pub grid_lr_scale: f64,
    pub sky_lr_scale: f64,
    pub code_lr_scale: f64,
    pub decoder_lr_scale: f64,
    pub lambda_sky: f64,
    pub gamma_reg: f64,
    /// Grid nodes along the longest scene axis; other axes keep the spacing.
    pub grid_res: usize,
    /// Sky map width and height.
    pub sky_res: [usize; 2],
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Initial raw density of every grid node.
    pub density_init: f64,
    pub correction: bool,
    pub shared_decoder: bool,
    pub code_std: f64,
    pub decoder_hidden: Vec<usize>,
    pub log_every: usize,
    pub virtual_per_real: usize,
    pub warp_max_rot_deg: f64,
    pub warp_max_trans: f64,
    pub consistency_rel_tol: f64,
    pub consistency_min_agree: usize,
    pub consistency_neighbors: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_iters: 8000,
            batch_rays: 4096,
            images_per_batch: 8,
            real_virtual_ratio: [4, 1],
            lr_start: 0.008,
            lr_end: 0.001,
            warmup_iters: 5000,
            grid_lr_scale: 10.0,
            sky_lr_scale: 10.0,
            code_lr_scale: 1.0,
            decoder_lr_scale: 0.25,
            lambda_sky: 2e-3,
            gamma_reg: 2e-3,
            grid_res: 64,
            sky_res: [128, 64],
            n_samples: 64,
            near: 0.05,
            far: 100.0,
            density_init: -3.0,
            correction: true,
            shared_decoder: false,
            code_std: 0.1,
            decoder_hidden: vec![256, 256, 256],
            log_every: 100,
            virtual_per_real: 9,
            warp_max_rot_deg: 20.0,
            warp_max_trans: 1.0,
            consistency_rel_tol: 0.01,
            consistency_min_agree: 4,
            consistency_neighbors: 6,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::Config(s.into()));
        if self.real_virtual_ratio[0] == 0 {
            return bad("real ratio part must be positive");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad("need lr_start ≥ lr_end > 0");
        }
        if self.warmup_iters > self.n_iters {
            return bad("warmup_iters exceeds n_iters");
        }
        if self.batch_rays == 0 || self.images_per_batch == 0 || self.n_samples == 0 {
            return bad("batch_rays, images_per_batch and n_samples must be positive");
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return bad("need 0 < near < far");
        }
        if self.grid_res < 2 || self.sky_res.iter().any(|&r| r < 2) {
            return bad("grid and sky resolutions must be ≥ 2");
        }
        if ![self.lambda_sky, self.gamma_reg, self.grid_lr_scale, self.sky_lr_scale, self.code_lr_scale, self.decoder_lr_scale]
            .iter()
            .all(|v| *v >= 0.0)
        {
            return bad("loss weights and lr scales must be non-negative");
        }
        Ok(())
    }

    pub fn warp_options(&self) -> WarpOptions {
        WarpOptions {
            max_rot_deg: self.warp_max_rot_deg,
            max_trans: self.warp_max_trans,
            virtual_per_real: self.virtual_per_real,
        }
    }

    fn lr_scale(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Grid => self.grid_lr_scale,
            ParamGroup::Sky => self.sky_lr_scale,
            ParamGroup::Codes => self.code_lr_scale,
            ParamGroup::Decoder => self.decoder_lr_scale,
        }
    }
}

/// Linear warmup from `lr_start / 10` to `lr_start`, then geometric decay
/// to `lr_end` at `n_iters`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.n_iters {
        return Err(TrainError::StepOutOfRange { step, n_iters: cfg.n_iters });
    }
    if step < cfg.warmup_iters {
        let f = step as f64 / cfg.warmup_iters as f64;
        return Ok(cfg.lr_start * (0.1 + 0.9 * f));
    }
    let span = cfg.n_iters - cfg.warmup_iters;
    let f = if span == 0 { 1.0 } else { (step - cfg.warmup_iters) as f64 / span as f64 };
    Ok((cfg.lr_start.ln() * (1.0 - f) + cfg.lr_end.ln() * f).exp())
}

/// Ray through the centre of `pixel` of a camera at `pose`.
pub fn pixel_ray(pose: &Pose, k: &Intrinsics, pixel: &Vector2<f64>, near: f64, far: f64) -> Result<Ray, RadianceError> {
    Ray::new(pose.translation, pose.rotate(&k.ray_direction(pixel)), near, far)
}

fn to_vec3(rgb: [f32; 3]) -> Vector3<f64> {
    Vector3::new(rgb[0] as f64, rgb[1] as f64, rgb[2] as f64)
}

/// A posed real image.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub id: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub image: Image,
    pub sky: Option<Bitmap>,
}

/// Posed images of `ids` under `rig`.
pub fn posed_images(ds: &Dataset, rig: &RigState, ids: &[usize]) -> Result<Vec<PosedImage>, TrainError> {
    let ks = ds.intrinsics();
    ids.iter()
        .map(|&id| {
            let f = ds.frames.get(id).ok_or_else(|| TrainError::Config(format!("image {id} not in dataset")))?;
            Ok(PosedImage {
                id,
                pose: rig.camera_pose(f.timestamp, f.camera)?,
                intrinsics: ks[f.camera],
                image: f.image.clone(),
                sky: f.sky.clone(),
            })
        })
        .collect()
}

/// Box around every valid depth point of `ids`, padded by 5% per axis.
pub fn scene_bounds(ds: &Dataset, rig: &RigState, ids: &[usize]) -> Result<Aabb, TrainError> {
    let ks = ds.intrinsics();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &id in ids {
        let f = &ds.frames[id];
        let Some(depth) = &f.depth else { continue };
        let pose = rig.camera_pose(f.timestamp, f.camera)?;
        for y in 0..depth.height {
            for x in 0..depth.width {
                let Some(d) = depth.get(x, y) else { continue };
                let p = pose.transform_point(&unproject(&ks[f.camera], &Vector2::new(x as f64, y as f64), d as f64)?);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    if !lo.iter().all(|v| v.is_finite()) {
        return Err(TrainError::Config("no valid depth to bound the scene".into()));
    }
    let pad = (hi - lo).map(|e| 0.05 * e + 0.1);
    Ok(Aabb::new(lo - pad, hi + pad)?)
}

/// Per-image consistency masks against the nearest training views, then
/// warped virtual views of every training image.
pub fn prepare_virtual_views(
    ds: &Dataset,
    rig: &RigState,
    train_ids: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<VirtualView>, TrainError> {
    if cfg.virtual_per_real == 0 {
        return Ok(Vec::new());
    }
    let ks = ds.intrinsics();
    let poses: Vec<Pose> =
        train_ids.iter().map(|&id| rig.camera_pose(ds.frames[id].timestamp, ds.frames[id].camera)).collect::<Result<_, _>>()?;
    let mut masks = Vec::with_capacity(train_ids.len());
    for (n, &id) in train_ids.iter().enumerate() {
        let f = &ds.frames[id];
        let depth = f.depth.as_ref().ok_or(WarpError::MissingDepth(id))?;
        let mut order: Vec<usize> = (0..train_ids.len()).filter(|&m| m != n).collect();
        order.sort_by(|&a, &b| poses[n].view_distance(&poses[a]).total_cmp(&poses[n].view_distance(&poses[b])));
        let neighbors: Vec<Neighbor<'_>> = order
            .iter()
            .take(cfg.consistency_neighbors)
            .filter_map(|&m| {
                let g = &ds.frames[train_ids[m]];
                Some(Neighbor {
                    depth: g.depth.as_ref()?,
                    intrinsics: &ks[g.camera],
                    ref_to_neighbor: poses[m].inverse().compose(&poses[n]),
                })
            })
            .collect();
        masks.push(consistency_mask(depth, &ks[f.camera], &neighbors, cfg.consistency_rel_tol, cfg.consistency_min_agree)?);
    }
    let sources: Vec<WarpSource<'_>> = train_ids
        .iter()
        .zip(&poses)
        .zip(&masks)
        .map(|((&id, pose), mask)| {
            let f = &ds.frames[id];
            WarpSource {
                image: &f.image,
                depth: f.depth.as_ref(),
                mask: Some(mask),
                intrinsics: &ks[f.camera],
                pose: *pose,
                camera: f.camera,
                code_ref: id,
            }
        })
        .collect();
    Ok(generate_virtual_set(&sources, &cfg.warp_options(), cfg.seed)?)
}

/// Everything a training run draws rays from.
pub struct TrainSet {
    pub views: Vec<PosedImage>,
    pub virtual_views: Vec<VirtualView>,
    /// Intrinsics per camera, for virtual views.
    pub intrinsics: Vec<Intrinsics>,
    pub bounds: Aabb,
    virtual_pixels: Vec<Vec<u32>>,
    /// Virtual views with at least one valid pixel, keyed by source image.
    by_source: BTreeMap<usize, Vec<usize>>,
}

impl TrainSet {
    pub fn new(
        views: Vec<PosedImage>,
        virtual_views: Vec<VirtualView>,
        intrinsics: Vec<Intrinsics>,
        bounds: Aabb,
    ) -> Result<Self, TrainError> {
        if views.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut by_source: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut virtual_pixels = Vec::with_capacity(virtual_views.len());
        for (n, v) in virtual_views.iter().enumerate() {
            if !views.iter().any(|r| r.id == v.code_ref) {
                return Err(TrainError::Config(format!("virtual view {n} refers to non-training image {}", v.code_ref)));
            }
            let w = v.valid.width;
            let pixels: Vec<u32> = (0..v.valid.height)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| v.valid.get(x, y))
                .map(|(x, y)| (y * w + x) as u32)
                .collect();
            if !pixels.is_empty() {
                by_source.entry(v.code_ref).or_default().push(n);
            }
            virtual_pixels.push(pixels);
        }
        Ok(Self { views, virtual_views, intrinsics, bounds, virtual_pixels, by_source })
    }

    pub fn from_dataset(
        ds: &Dataset,
        rig: &RigState,
        train_ids: &[usize],
        virtual_views: Vec<VirtualView>,
    ) -> Result<Self, TrainError> {
        let bounds = scene_bounds(ds, rig, train_ids)?;
        Self::new(posed_images(ds, rig, train_ids)?, virtual_views, ds.intrinsics(), bounds)
    }

    pub fn image_ids(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.id).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rays: Vec<TrainRay>,
    pub n_real: usize,
    pub n_virtual: usize,
}

/// Real and virtual ray counts for the configured ratio.
pub fn ray_split(batch_rays: usize, ratio: [usize; 2]) -> (usize, usize) {
    let parts = ratio[0] + ratio[1];
    let real = ((batch_rays * ratio[0]) as f64 / parts as f64).round() as usize;
    (real, batch_rays - real)
}

/// Draws `images_per_batch` real images, then real rays from them and
/// virtual rays from their warped views. Falls back to real rays only,
/// with a warning, when those images have no valid virtual pixels.
pub fn make_batch(set: &TrainSet, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch, TrainError> {
    if set.views.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let b = cfg.images_per_batch.min(set.views.len());
    let chosen = rand::seq::index::sample(rng, set.views.len(), b).into_vec();
    let pool: Vec<usize> =
        chosen.iter().flat_map(|&n| set.by_source.get(&set.views[n].id).into_iter().flatten().copied()).collect();
    let (mut n_real, mut n_virtual) = ray_split(cfg.batch_rays, cfg.real_virtual_ratio);
    if n_virtual > 0 && pool.is_empty() {
        log::warn!("no valid virtual pixels for this batch; using real rays only");
        n_real += n_virtual;
        n_virtual = 0;
    }
    let mut rays = Vec::with_capacity(cfg.batch_rays);
    for _ in 0..n_real {
        let v = &set.views[chosen[rng.random_range(0..b)]];
        let (x, y) = (rng.random_range(0..v.image.width), rng.random_range(0..v.image.height));
        rays.push(TrainRay {
            ray: pixel_ray(&v.pose, &v.intrinsics, &Vector2::new(x as f64, y as f64), cfg.near, cfg.far)?,
            target: to_vec3(v.image.get(x, y)),
            sky: v.sky.as_ref().is_some_and(|s| s.get(x, y)),
            code_ref: v.id,
            jitter: rng.random(),
        });
    }
    for _ in 0..n_virtual {
        let n = pool[rng.random_range(0..pool.len())];
        let v = &set.virtual_views[n];
        let pixels = &set.virtual_pixels[n];
        let p = pixels[rng.random_range(0..pixels.len())] as usize;
        let (x, y) = (p % v.image.width, p / v.image.width);
        rays.push(TrainRay {
            ray: pixel_ray(&v.pose, &set.intrinsics[v.camera], &Vector2::new(x as f64, y as f64), cfg.near, cfg.far)?,
            target: to_vec3(v.image.get(x, y)),
            sky: false,
            code_ref: v.code_ref,
            jitter: rng.random(),
        });
    }
    Ok(Batch { rays, n_real, n_virtual })
}

/// Adam with per-group learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, model: &mut Model, grad: &ModelGrad, lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((group, params), (_, g)), (m, v)) in
            model.params_mut().into_iter().zip(&grad.groups).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let lr = lr(group);
            for (((p, g), m), v) in params.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss_pho: f64,
    pub loss_sky: f64,
    pub loss_reg: f64,
    pub lr: f64,
    pub psnr_val: Option<f64>,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricRecord>,
}

impl TrainOutput {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

fn grid_resolution(bounds: &Aabb, longest: usize) -> [usize; 3] {
    let ext = bounds.max - bounds.min;
    let spacing = ext.max() / (longest - 1) as f64;
    [0, 1, 2].map(|a| ((ext[a] / spacing).ceil() as usize + 1).max(2))
}

/// Fresh model over the training set's bounds.
pub fn init_model(set: &TrainSet, cfg: &TrainConfig) -> Result<Model, TrainError> {
    let fg = VoxelGrid::new(grid_resolution(&set.bounds, cfg.grid_res), set.bounds, cfg.density_init, 0.0)?;
    let sky = SkyMap::new(cfg.sky_res[0], cfg.sky_res[1], 0.0)?;
    let correction = if cfg.correction {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_INIT);
        Some(ColorCorrection::new(&set.image_ids(), &cfg.decoder_hidden, cfg.shared_decoder, cfg.code_std, &mut rng)?)
    } else {
        None
    };
    Ok(Model { field: LayeredRadianceField { fg, sky }, correction })
}

fn checkpoint(model: &Model, set: &TrainSet, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        code_poses: set.views.iter().map(|v| (v.id, v.pose)).collect(),
        n_samples: cfg.n_samples,
        near: cfg.near,
        far: cfg.far,
    }
}

/// Mean PSNR of held-out images rendered with their nearest training
/// image's codes.
pub fn held_out_psnr(ck: &Checkpoint, held_out: &[PosedImage]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for v in held_out {
        let tf = ck.model.transforms(nearest_code(&ck.code_poses, &v.pose))?;
        let img = render_image(&ck.model, &v.pose, &v.intrinsics, ck.n_samples, ck.near, ck.far, &tf)?;
        sum += psnr(&img, &v.image)?;
    }
    Ok(sum / held_out.len() as f64)
}

/// Runs `n_iters` Adam steps. Held-out PSNR is logged every `log_every`
/// steps and at the end when `held_out` is non-empty.
pub fn train(set: &TrainSet, held_out: &[PosedImage], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if set.by_source.is_empty() && cfg.real_virtual_ratio[1] > 0 {
        log::warn!("virtual set is empty; training on real rays only");
        cfg.real_virtual_ratio[1] = 0;
    }
    let mut model = init_model(set, &cfg)?;
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_BATCH);
    let opts = ObjectiveOptions {
        n_samples: cfg.n_samples,
        weights: LossWeights { sky: cfg.lambda_sky, reg: cfg.gamma_reg },
    };
    let mut log = Vec::new();
    for step in 0..cfg.n_iters {
        let batch = make_batch(set, &cfg, &mut rng)?;
        let (loss, grad) = match loss_and_grad(&model, &batch.rays, &opts) {
            Ok(v) => v,
            Err(RadianceError::NonFiniteLoss(_)) => {
                return Err(TrainError::NonFinite { step, last: Box::new(checkpoint(&model, set, &cfg)) })
            }
            Err(e) => return Err(e.into()),
        };
        let lr = lr_at(step, &cfg)?;
        adam.step(&mut model, &grad, |g| lr * cfg.lr_scale(g));
        let last = step + 1 == cfg.n_iters;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || last) {
            let psnr_val = if held_out.is_empty() {
                None
            } else {
                Some(held_out_psnr(&checkpoint(&model, set, &cfg), held_out)?)
            };
            log::info!("step {step}: pho {:.5} sky {:.4} reg {:.4} lr {lr:.5} psnr {psnr_val:?}", loss.pho, loss.sky, loss.reg);
            log.push(MetricRecord { step, loss_pho: loss.pho, loss_sky: loss.sky, loss_reg: loss.reg, lr, psnr_val });
        }
    }
    Ok(TrainOutput { checkpoint: checkpoint(&model, set, &cfg), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DepthMap;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig { n_iters: 10_000, warmup_iters: 5000, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert!((lr_at(5000, &c).unwrap() - 0.008).abs() < 1e-15);
        assert!((lr_at(10_000, &c).unwrap() - 0.001).abs() < 1e-15);
        assert!((lr_at(7500, &c).unwrap() - (0.008f64 * 0.001).sqrt()).abs() < 1e-12);
        assert!((lr_at(0, &c).unwrap() - 0.0008).abs() < 1e-15);
        assert!(matches!(lr_at(10_001, &c), Err(TrainError::StepOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_after_warmup(n in 1usize..20_000, w_frac in 0.0f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let w = (n as f64 * w_frac) as usize;
            let c = TrainConfig { n_iters: n, warmup_iters: w, ..TrainConfig::default() };
            let (s0, s1) = {
                let x = w + ((n - w) as f64 * a.min(b)) as usize;
                let y = w + ((n - w) as f64 * a.max(b)) as usize;
                (x, y)
            };
            prop_assert!(lr_at(s1, &c).unwrap() <= lr_at(s0, &c).unwrap() + 1e-18);
            prop_assert!(lr_at(s0, &c).unwrap() >= c.lr_end - 1e-15);
        }
    }

    #[test]
    fn config_validation_and_toml() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let parsed = TrainConfig::from_toml("n_iters = 200\nwarmup_iters = 20\nlambda_sky = 0.004\n").unwrap();
        assert_eq!((parsed.n_iters, parsed.lambda_sky, parsed.batch_rays), (200, 0.004, 4096));
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("lr_start = 0.001\nlr_end = 0.002").is_err());
        assert!(TrainConfig::from_toml("real_virtual_ratio = [0, 1]").is_err());
    }

    fn toy_set(n_images: usize, virtual_valid: bool) -> TrainSet {
        let k = Intrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
        let views: Vec<PosedImage> = (0..n_images)
            .map(|id| PosedImage {
                id,
                pose: Pose::from_translation(Vector3::new(id as f64 * 0.1, 0.0, -3.0)),
                intrinsics: k,
                image: Image::from_fn(8, 8, |x, y| [x as f32 / 8.0, y as f32 / 8.0, 0.5]),
                sky: Some(Bitmap::new(8, 8, false)),
            })
            .collect();
        let virtual_views = (0..n_images)
            .map(|id| {
                let mut valid = Bitmap::new(8, 8, false);
                if virtual_valid {
                    valid.set(2, 3, true);
                }
                VirtualView {
                    pose: Pose::identity(),
                    camera: 0,
                    image: Image::filled(8, 8, [0.25, 0.5, 0.75]),
                    valid,
                    depth: DepthMap::invalid(8, 8),
                    code_ref: id,
                }
            })
            .collect();
        let bounds = Aabb::new(Vector3::repeat(-1.0), Vector3::repeat(1.0)).unwrap();
        TrainSet::new(views, virtual_views, vec![k], bounds).unwrap()
    }

    #[test]
    fn batch_composition() {
        let c = TrainConfig { batch_rays: 100, ..TrainConfig::default() };
        let set = toy_set(12, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batch(&set, &c, &mut rng).unwrap();
        assert_eq!((b.n_real, b.n_virtual, b.rays.len()), (80, 20, 100));
        let real_ids: std::collections::BTreeSet<usize> = b.rays[..80].iter().map(|r| r.code_ref).collect();
        assert!(real_ids.len() <= 8);
        for r in &b.rays[80..] {
            assert!(real_ids.contains(&r.code_ref), "virtual ray must come from a chosen image");
            assert!(!r.sky);
            assert_eq!(r.target, Vector3::new(0.25, 0.5, 0.75));
        }
        let again = make_batch(&set, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, again);

        let empty = toy_set(12, false);
        let b = make_batch(&empty, &c, &mut rng).unwrap();
        assert_eq!((b.n_real, b.n_virtual), (100, 0));
        assert_eq!(ray_split(4096, [4, 1]), (3277, 819));
        assert_eq!(ray_split(10, [1, 0]), (10, 0));
    }

    #[test]
    fn virtual_views_must_reference_training_images() {
        let set = toy_set(2, true);
        let mut vv = set.virtual_views.clone();
        vv[0].code_ref = 7;
        assert!(matches!(TrainSet::new(set.views, vv, set.intrinsics, set.bounds), Err(TrainError::Config(_))));
    }

    #[test]
    fn single_image_smoke_run_descends() {
        let set = toy_set(1, false);
        let c = TrainConfig {
            n_iters: 200,
            warmup_iters: 20,
            batch_rays: 64,
            images_per_batch: 1,
            real_virtual_ratio: [1, 0],
            grid_res: 8,
            sky_res: [8, 4],
            n_samples: 16,
            lambda_sky: 0.0,
            gamma_reg: 0.0,
            correction: false,
            log_every: 1,
            ..TrainConfig::default()
        };
        let out = train(&set, &[], &c).unwrap();
        let first = out.log.first().unwrap().loss_pho;
        let last = out.log.last().unwrap().loss_pho;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(out.log.len(), 200);
        assert!(out.log.iter().all(|r| r.psnr_val.is_none()));
    }
}
