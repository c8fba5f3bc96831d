//! Virtual view synthesis by forward depth warping.
//!
//! A real image is pushed through its depth map into a randomly perturbed
//! pose. Colliding pixels are resolved by keeping the smallest warped depth
//! and pixels never hit stay invalid. Only pixels that pass a multi-view
//! geometric consistency check are warped.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project, unproject, Intrinsics, Pose};
use crate::raster::{Bitmap, DepthMap, Image};

#[derive(Debug, Error, PartialEq)]
pub enum WarpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("consistency check needs at least one neighbor view")]
    NoNeighbors,
    #[error("image {0} has no depth map or consistency mask")]
    MissingDepth(usize),
    #[error("invalid warp options: {0}")]
    InvalidOptions(String),
}

/// Identifier of the real image whose color-correction codes a pixel uses.
pub type CodeRef = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpOptions {
    pub max_rot_deg: f64,
    pub max_trans: f64,
    pub virtual_per_real: usize,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self { max_rot_deg: 20.0, max_trans: 1.0, virtual_per_real: 9 }
    }
}

impl WarpOptions {
    pub fn validate(&self) -> Result<(), WarpError> {
        if !(self.max_rot_deg >= 0.0) || !(self.max_trans >= 0.0) {
            return Err(WarpError::InvalidOptions("perturbation magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// A warped image at a virtual pose.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualView {
    /// Camera-to-world pose of the virtual camera.
    pub pose: Pose,
    pub camera: usize,
    pub image: Image,
    pub valid: Bitmap,
    pub depth: DepthMap,
    pub code_ref: CodeRef,
}

impl VirtualView {
    pub fn valid_count(&self) -> usize {
        self.valid.count()
    }
}

/// Original→virtual relative transform: a rotation about one random
/// coordinate axis and a translation of random direction and length.
pub fn sample_relative_transform(rng: &mut impl Rng, opts: &WarpOptions) -> Pose {
    let axis = match rng.random_range(0..3) {
        0 => Vector3::x_axis(),
        1 => Vector3::y_axis(),
        _ => Vector3::z_axis(),
    };
    let angle = if opts.max_rot_deg > 0.0 {
        rng.random_range(-opts.max_rot_deg..=opts.max_rot_deg).to_radians()
    } else {
        0.0
    };
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let len = if opts.max_trans > 0.0 { rng.random_range(0.0..=opts.max_trans) } else { 0.0 };
    Pose::new(UnitQuaternion::from_axis_angle(&axis, angle), Vector3::from(dir) * len)
}

/// Virtual pose `T_v = T_o ∘ T_rel⁻¹`, so that `T_v⁻¹ ∘ T_o = T_rel` maps
/// original-camera points into the virtual camera.
pub fn sample_virtual_pose(seed: u64, original: &Pose, opts: &WarpOptions) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rel = sample_relative_transform(&mut rng, opts);
    original.compose(&rel.inverse())
}

/// Forward-warps `image` into a camera related by `rel` (original→virtual).
///
/// Sources are visited in row-major order; a later source replaces an
/// earlier one only with a strictly smaller depth.
pub fn warp_to_virtual(
    image: &Image,
    depth: &DepthMap,
    mask: &Bitmap,
    k: &Intrinsics,
    rel: &Pose,
    code_ref: CodeRef,
) -> Result<(Image, Bitmap, DepthMap, CodeRef), WarpError> {
    let (w, h) = (image.width, image.height);
    if depth.width != w || depth.height != h || mask.width != w || mask.height != h {
        return Err(WarpError::ShapeMismatch(format!(
            "image {}x{}, depth {}x{}, mask {}x{}",
            w, h, depth.width, depth.height, mask.width, mask.height
        )));
    }
    if k.width as usize != w || k.height as usize != h {
        return Err(WarpError::ShapeMismatch(format!("intrinsics {}x{} vs image {}x{}", k.width, k.height, w, h)));
    }
    let mut out = Image::new(w, h);
    let mut valid = Bitmap::new(w, h, false);
    let mut zbuf = DepthMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let Some(d) = depth.get(x, y) else { continue };
            let Some((px, d_v)) = warp_pixel(k, rel, x, y, d as f64) else { continue };
            let Some((u, v)) = k.nearest_pixel(&px) else { continue };
            let d_v = d_v as f32;
            if zbuf.get(u, v).is_some_and(|cur| cur <= d_v) {
                continue;
            }
            zbuf.set(u, v, d_v);
            out.set(u, v, image.get(x, y));
            valid.set(u, v, true);
        }
    }
    Ok((out, valid, zbuf, code_ref))
}

/// `d_v p̄_v = K (R K⁻¹ d_o p̄_o + t)`; returns the continuous target pixel and `d_v`.
pub fn warp_pixel(k: &Intrinsics, rel: &Pose, x: usize, y: usize, depth: f64) -> Option<(Vector2<f64>, f64)> {
    let p = unproject(k, &Vector2::new(x as f64, y as f64), depth).ok()?;
    let q = rel.transform_point(&p);
    let px = project(k, &q).ok()?;
    Some((px, q.z))
}

/// A neighbor view for the consistency check: its depth map, intrinsics and
/// the transform from reference-camera to neighbor-camera coordinates.
pub struct Neighbor<'a> {
    pub depth: &'a DepthMap,
    pub intrinsics: &'a Intrinsics,
    pub ref_to_neighbor: Pose,
}

/// Keeps reference pixels whose depth agrees, within `rel_tol` relative
/// error, with the nearest-pixel depth of at least `min_agree` neighbors.
pub fn consistency_mask(
    reference: &DepthMap,
    k_ref: &Intrinsics,
    neighbors: &[Neighbor<'_>],
    rel_tol: f64,
    min_agree: usize,
) -> Result<Bitmap, WarpError> {
    if neighbors.is_empty() {
        return Err(WarpError::NoNeighbors);
    }
    let (w, h) = (reference.width, reference.height);
    let rows: Vec<Vec<bool>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let Some(d) = reference.get(x, y) else { return false };
                    let p = match unproject(k_ref, &Vector2::new(x as f64, y as f64), d as f64) {
                        Ok(p) => p,
                        Err(_) => return false,
                    };
                    let agree = neighbors
                        .iter()
                        .filter(|n| {
                            let q = n.ref_to_neighbor.transform_point(&p);
                            let Ok(px) = project(n.intrinsics, &q) else { return false };
                            let Some((u, v)) = n.intrinsics.nearest_pixel(&px) else { return false };
                            let Some(dn) = n.depth.get(u, v) else { return false };
                            let dn = dn as f64;
                            (q.z - dn).abs() / dn <= rel_tol
                        })
                        .count();
                    agree >= min_agree
                })
                .collect()
        })
        .collect();
    let mut mask = Bitmap::new(w, h, false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, b) in row.into_iter().enumerate() {
            mask.set(x, y, b);
        }
    }
    Ok(mask)
}

/// One real image with everything warping needs.
pub struct WarpSource<'a> {
    pub image: &'a Image,
    pub depth: Option<&'a DepthMap>,
    pub mask: Option<&'a Bitmap>,
    pub intrinsics: &'a Intrinsics,
    pub pose: Pose,
    pub camera: usize,
    pub code_ref: CodeRef,
}

/// Seed for the `v`-th virtual view of image `image_index`.
pub fn view_seed(seed: u64, image_index: usize, v: usize) -> u64 {
    // splitmix64 over the packed indices
    let mut z = seed ^ ((image_index as u64) << 20 | v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Emits `virtual_per_real` virtual views per real image, each carrying its
/// source image's code reference. Deterministic for a fixed seed.
pub fn generate_virtual_set(sources: &[WarpSource<'_>], opts: &WarpOptions, seed: u64) -> Result<Vec<VirtualView>, WarpError> {
    opts.validate()?;
    for (i, s) in sources.iter().enumerate() {
        if s.depth.is_none() || s.mask.is_none() {
            return Err(WarpError::MissingDepth(i));
        }
    }
    let jobs: Vec<(usize, usize)> =
        (0..sources.len()).flat_map(|i| (0..opts.virtual_per_real).map(move |v| (i, v))).collect();
    jobs.par_iter()
        .map(|&(i, v)| {
            let s = &sources[i];
            let mut rng = ChaCha8Rng::seed_from_u64(view_seed(seed, i, v));
            let rel = sample_relative_transform(&mut rng, opts);
            let pose = s.pose.compose(&rel.inverse());
            let (image, valid, depth, code_ref) =
                warp_to_virtual(s.image, s.depth.unwrap(), s.mask.unwrap(), s.intrinsics, &rel, s.code_ref)?;
            Ok(VirtualView { pose, camera: s.camera, image, valid, depth, code_ref })
        })
        .collect()
}
