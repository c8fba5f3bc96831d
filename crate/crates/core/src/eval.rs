//! Image metrics, the held-out split, view rendering and evaluation reports.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::geometry::{GeometryError, Intrinsics, Pose, RigState};
use crate::radiance::{Affine, Checkpoint, Model, RadianceError, Ray};
use crate::raster::Image;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall { width: usize, height: usize, window: usize },
    #[error("need at least {needed} images per camera, found {found}")]
    TooFewImages { needed: usize, found: usize },
    #[error(transparent)]
    Radiance(#[from] RadianceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// One of every this many timestamps is held out.
pub const TEST_STRIDE: usize = 8;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<(), EvalError> {
    if !a.same_shape(b) {
        return Err(EvalError::ShapeMismatch(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over all pixels and channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as f64 - q[c] as f64).powi(2)))
        .sum();
    let mse = sum / (a.data.len() * 3) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over every
/// fully contained window position and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::ImageTooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|p| p[c] as f64).collect();
        let y: Vec<f64> = b.data.iter().map(|p| p[c] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &k));
        for i in 0..mx.len() {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            total += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Splits image ids into (train, test): per camera, timestamps divisible by
/// [`TEST_STRIDE`] are held out.
pub fn split_dataset(ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    let n_t = ds.n_timestamps();
    if n_t < TEST_STRIDE {
        return Err(EvalError::TooFewImages { needed: TEST_STRIDE, found: n_t });
    }
    Ok((0..ds.frames.len()).partition(|&id| ds.frames[id].timestamp % TEST_STRIDE != 0))
}

/// Which correction codes a rendered view uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodePolicy {
    /// Codes of the training image closest in centre position and orientation.
    Nearest,
    Identity,
    /// Codes of one registered image.
    Image(usize),
}

impl std::fmt::Display for CodePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodePolicy::Nearest => write!(f, "nearest"),
            CodePolicy::Identity => write!(f, "identity"),
            CodePolicy::Image(id) => write!(f, "image:{id}"),
        }
    }
}

impl std::str::FromStr for CodePolicy {
    type Err = String;

    /// Parses `nearest`, `identity` or `image:<id>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(CodePolicy::Nearest),
            "identity" => Ok(CodePolicy::Identity),
            _ => s
                .strip_prefix("image:")
                .and_then(|id| id.parse().ok())
                .map(CodePolicy::Image)
                .ok_or_else(|| format!("unknown code policy {s:?}; expected nearest, identity or image:<id>")),
        }
    }
}

/// Id of the code pose nearest to `pose`; ties go to the lowest id.
pub fn nearest_code(code_poses: &[(usize, Pose)], pose: &Pose) -> Option<usize> {
    code_poses
        .iter()
        .map(|(id, p)| (pose.view_distance(p), *id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// Correction transforms for a view at `pose` under `policy`.
pub fn resolve_transforms(ck: &Checkpoint, pose: &Pose, policy: CodePolicy) -> Result<(Affine, Affine), EvalError> {
    if ck.model.correction.is_none() {
        return Ok((Affine::identity(), Affine::identity()));
    }
    let id = match policy {
        CodePolicy::Identity => None,
        CodePolicy::Image(id) => Some(id),
        CodePolicy::Nearest => nearest_code(&ck.code_poses, pose),
    };
    Ok(ck.model.transforms(id)?)
}

fn clamp_rgb(v: nalgebra::Vector3<f64>) -> [f32; 3] {
    [v.x.clamp(0.0, 1.0) as f32, v.y.clamp(0.0, 1.0) as f32, v.z.clamp(0.0, 1.0) as f32]
}

fn render_rays(
    model: &Model,
    width: usize,
    height: usize,
    n_samples: usize,
    transforms: &(Affine, Affine),
    ray: impl Fn(usize, usize) -> Result<Ray, RadianceError> + Sync,
) -> Result<Image, RadianceError> {
    let rows: Vec<Vec<[f32; 3]>> = (0..height)
        .into_par_iter()
        .map(|y| (0..width).map(|x| Ok(clamp_rgb(model.render(&ray(x, y)?, n_samples, transforms)?))).collect())
        .collect::<Result<_, RadianceError>>()?;
    Ok(Image { width, height, data: rows.into_iter().flatten().collect() })
}

/// Pinhole render of `model`, clamped to `[0, 1]`.
pub fn render_image(
    model: &Model,
    pose: &Pose,
    k: &Intrinsics,
    n_samples: usize,
    near: f64,
    far: f64,
    transforms: &(Affine, Affine),
) -> Result<Image, RadianceError> {
    render_rays(model, k.width as usize, k.height as usize, n_samples, transforms, |x, y| {
        Ray::new(pose.translation, pose.rotate(&k.ray_direction(&Vector2::new(x as f64, y as f64))), near, far)
    })
}

pub fn render_view(ck: &Checkpoint, pose: &Pose, k: &Intrinsics, policy: CodePolicy) -> Result<Image, EvalError> {
    let tf = resolve_transforms(ck, pose, policy)?;
    Ok(render_image(&ck.model, pose, k, ck.n_samples, ck.near, ck.far, &tf)?)
}

/// World direction (z up) of panorama pixel `(u, v)`: columns sweep
/// longitude from −180° to 180°, rows latitude from 90° down to −90°.
pub fn panorama_direction(u: usize, v: usize, width: usize, height: usize) -> nalgebra::Vector3<f64> {
    let lon = (u as f64 + 0.5) / width as f64 * 2.0 * PI - PI;
    let lat = FRAC_PI_2 - (v as f64 + 0.5) / height as f64 * PI;
    nalgebra::Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
}

/// Equirectangular render from the centre of `pose`.
pub fn render_panorama(
    ck: &Checkpoint,
    pose: &Pose,
    width: usize,
    height: usize,
    policy: CodePolicy,
) -> Result<Image, EvalError> {
    if width < 2 || height < 2 {
        return Err(EvalError::ImageTooSmall { width, height, window: 2 });
    }
    let tf = resolve_transforms(ck, pose, policy)?;
    Ok(render_rays(&ck.model, width, height, ck.n_samples, &tf, |u, v| {
        Ray::new(pose.translation, panorama_direction(u, v, width, height), ck.near, ck.far)
    })?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: usize,
    pub timestamp: usize,
    pub camera: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub split: String,
    pub code_policy: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::from("image  t     cam  psnr     ssim\n");
        for r in &self.images {
            let _ = writeln!(s, "{:<6} {:<5} {:<4} {:>7.3}  {:.4}", r.image_id, r.timestamp, r.camera, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "mean               {:>7.3}  {:.4}", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Hex SHA-256 of a configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Scores renders of `ids` under `rig` against the dataset images.
pub fn evaluate(
    ck: &Checkpoint,
    ds: &Dataset,
    rig: &RigState,
    ids: &[usize],
    policy: CodePolicy,
    config_hash: &str,
) -> Result<EvalReport, EvalError> {
    let ks = ds.intrinsics();
    let mut images = Vec::with_capacity(ids.len());
    for &id in ids {
        let f = &ds.frames[id];
        let pose = rig.camera_pose(f.timestamp, f.camera)?;
        let img = render_view(ck, &pose, &ks[f.camera], policy)?;
        images.push(ImageScore {
            image_id: id,
            timestamp: f.timestamp,
            camera: f.camera,
            psnr: psnr(&img, &f.image)?,
            ssim: ssim(&img, &f.image)?,
        });
    }
    let n = images.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: images.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|r| r.ssim).sum::<f64>() / n,
        split: format!("every {TEST_STRIDE}th timestamp held out; {} images scored", images.len()),
        code_policy: policy.to_string(),
        config_hash: config_hash.to_string(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiance::{Aabb, LayeredRadianceField, SkyMap, VoxelGrid};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn checker(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| if (x + y) % 2 == 0 { [1.0; 3] } else { [0.0; 3] })
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(16, 16, [0.3, 0.4, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Image::filled(16, 16, [0.4, 0.5, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let z = Image::filled(16, 16, [0.0; 3]);
        assert!((psnr(&checker(16, 16), &z).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!(matches!(psnr(&a, &Image::new(8, 16)), Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_examples() {
        let a = checker(16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let inv = Image::from_fn(16, 16, |x, y| a.get(x, y).map(|v| 1.0 - v));
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let (m1, m2) = (0.5f64, 0.7f32 as f64);
        let expect = (2.0 * m1 * m2 + c1) * c2 / ((m1 * m1 + m2 * m2 + c1) * c2);
        let s = ssim(&Image::filled(12, 12, [0.5; 3]), &Image::filled(12, 12, [0.7; 3])).unwrap();
        assert!((s - expect).abs() < 1e-9, "{s} vs {expect}");
        assert!(matches!(ssim(&Image::new(10, 20), &Image::new(10, 20)), Err(EvalError::ImageTooSmall { .. })));
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_flip_invariant(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut img = || Image::from_fn(13, 12, |_, _| [rng.random(), rng.random(), rng.random()]);
            let (a, b) = (img(), img());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let (fa, fb) = (a.flipped_horizontally(), b.flipped_horizontally());
            prop_assert!((psnr(&fa, &fb).unwrap() - psnr(&a, &b).unwrap()).abs() < 1e-9);
            prop_assert!((ssim(&fa, &fb).unwrap() - ssim(&a, &b).unwrap()).abs() < 1e-9);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    fn empty_checkpoint(correction: bool) -> Checkpoint {
        let bounds = Aabb::new(Vector3::repeat(-1.0), Vector3::repeat(1.0)).unwrap();
        let mut sky = SkyMap::new(16, 8, 0.0).unwrap();
        for (n, v) in sky.values.iter_mut().enumerate() {
            *v = ((n * 7) % 11) as f64 * 0.2 - 1.0;
        }
        let correction = correction.then(|| {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
            crate::radiance::ColorCorrection::new(&[0, 1], &[8], false, 0.5, &mut rng).unwrap()
        });
        Checkpoint {
            model: Model {
                field: LayeredRadianceField { fg: VoxelGrid::new([4, 4, 4], bounds, -1e3, 0.0).unwrap(), sky },
                correction,
            },
            code_poses: vec![(0, Pose::identity()), (1, Pose::from_translation(Vector3::new(5.0, 0.0, 0.0)))],
            n_samples: 8,
            near: 0.01,
            far: 10.0,
        }
    }

    #[test]
    fn empty_field_renders_pure_sky() {
        let ck = empty_checkpoint(false);
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        let pose = Pose::identity();
        let img = render_view(&ck, &pose, &k, CodePolicy::Identity).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let d = pose.rotate(&k.ray_direction(&Vector2::new(x as f64, y as f64)));
                let s = ck.model.field.sky.lookup(&d);
                let p = img.get(x, y);
                assert!((0..3).all(|c| (p[c] as f64 - s[c]).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn panorama_covers_the_sphere() {
        let ck = empty_checkpoint(false);
        let pano = render_panorama(&ck, &Pose::identity(), 16, 8, CodePolicy::Identity).unwrap();
        assert_eq!((pano.width, pano.height), (16, 8));
        let sky = &ck.model.field.sky;
        for v in 0..8 {
            for u in 0..16 {
                assert!((sky.texel_direction(u, v) - panorama_direction(u, v, 16, 8)).norm() < 1e-12);
            }
        }
        let lons: Vec<f64> = (0..16).map(|u| { let d = panorama_direction(u, 4, 16, 8); d.y.atan2(d.x) }).collect();
        assert!(lons[0] < -PI + 0.2 && lons[15] > PI - 0.2);
        assert!(panorama_direction(0, 0, 16, 8).z > 0.9 && panorama_direction(0, 7, 16, 8).z < -0.9);
        // Pure sky: the panorama reproduces the sky texels.
        for v in 0..8 {
            for u in 0..16 {
                let s = ck.model.field.sky.lookup(&ck.model.field.sky.texel_direction(u, v));
                assert!((0..3).all(|c| (pano.get(u, v)[c] as f64 - s[c]).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn code_policies() {
        let mut ck = empty_checkpoint(true);
        let cc = ck.model.correction.as_mut().unwrap();
        let out = cc.decoders[0].output_layer_range();
        cc.decoders[0].params[out.end - 1] = 0.3;
        let near_second = Pose::from_translation(Vector3::new(4.0, 0.0, 0.0));
        assert_eq!(nearest_code(&ck.code_poses, &near_second), Some(1));
        assert_eq!(nearest_code(&ck.code_poses, &Pose::identity()), Some(0));
        let (id_tf, _) = resolve_transforms(&ck, &near_second, CodePolicy::Identity).unwrap();
        assert_eq!(id_tf, Affine::identity());
        let (a, _) = resolve_transforms(&ck, &near_second, CodePolicy::Nearest).unwrap();
        let (b, _) = resolve_transforms(&ck, &near_second, CodePolicy::Image(1)).unwrap();
        assert_eq!(a, b);
        assert!(resolve_transforms(&ck, &near_second, CodePolicy::Image(9)).is_err());
        for policy in [CodePolicy::Nearest, CodePolicy::Identity, CodePolicy::Image(7)] {
            assert_eq!(policy.to_string().parse::<CodePolicy>(), Ok(policy));
        }
        assert!("image:x".parse::<CodePolicy>().is_err());
    }

    #[test]
    fn split_examples() {
        use crate::scenegen::{generate, SceneSpec};
        let mut s = SceneSpec::street(0);
        s.width = 16;
        s.height = 12;
        s.trajectory.n_timestamps = 16;
        let ds = generate(&s).unwrap();
        let (train, test) = split_dataset(&ds).unwrap();
        assert_eq!((train.len(), test.len()), (14 * 3, 2 * 3));
        assert!(train.iter().all(|id| !test.contains(id)));
        assert_eq!(split_dataset(&ds).unwrap(), (train, test));
        let mut short = ds.clone();
        short.rig_true.ego_poses.truncate(8);
        short.frames.truncate(24);
        assert_eq!(split_dataset(&short).unwrap().1.len(), 3);
        short.rig_true.ego_poses.truncate(7);
        short.frames.truncate(21);
        assert!(matches!(split_dataset(&short), Err(EvalError::TooFewImages { .. })));
    }
}
