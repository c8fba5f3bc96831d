//! Deterministic synthetic multi-camera scenes with full ground truth.
//!
//! Scenes are analytic (axis-aligned rectangles and boxes over a procedural
//! sky), so depths, sky masks and correspondences are exact. Each image is
//! distorted by its own affine color transform standing in for a camera's
//! signal processing.

mod scene;

pub use scene::{sky_color, Hit, Material, Primitive, Scene};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AffineRecord, Dataset, Frame, IspRecord};
use crate::geometry::{project, GeometryError, Intrinsics, Pose, RigFile, RigState};
use crate::pose_refine::{CorrespondenceEdge, CorrespondenceGraph, PoseRefineError, ViewId};
use crate::radiance::Affine;
use crate::raster::{Bitmap, DepthMap, Image};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("no surface point is visible in two views")]
    NoOverlap,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    PoseRefine(#[from] PoseRefineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub name: String,
    /// Heading relative to the vehicle's forward axis, counter-clockwise.
    pub yaw_deg: f64,
    /// Downward tilt.
    pub pitch_deg: f64,
    /// Position in the vehicle frame (x forward, y left, z up).
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryPreset {
    Straight,
    /// Constant turn rate.
    Arc,
    /// Straight, then turning over the middle third, then straight.
    Turning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub preset: TrajectoryPreset,
    pub n_timestamps: usize,
    /// Distance travelled between timestamps.
    pub step: f64,
    /// Heading change per timestamp while turning.
    pub turn_deg: f64,
    pub start: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IspSpec {
    pub enabled: bool,
    /// Half-range of the per-camera diagonal deviation from 1.
    pub diag: f64,
    pub offdiag: f64,
    pub offset: f64,
    /// Half-range of the extra per-image diagonal and offset deviation.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub rot_deg: f64,
    pub trans: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub sigma_px: f64,
    pub outlier_fraction: f64,
    /// Same-camera views are matched up to this many timestamps later.
    pub same_camera_window: usize,
    /// Views of other cameras are matched up to this many timestamps later.
    pub cross_camera_window: usize,
    pub per_pair: usize,
    /// Pairs with fewer matches are dropped.
    pub min_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    pub cameras: Vec<CameraSpec>,
    pub trajectory: TrajectorySpec,
    pub primitives: Vec<Primitive>,
    pub isp: IspSpec,
    pub perturb: PerturbSpec,
    pub matches: MatchSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::street(0)
    }
}

fn material(rng: &mut ChaCha8Rng) -> Material {
    Material {
        color: [rng.random_range(0.35..0.95), rng.random_range(0.35..0.95), rng.random_range(0.35..0.95)],
        pattern_freq: rng.random_range(0.1..0.25),
        pattern_amp: rng.random_range(0.2..0.45),
    }
}

impl SceneSpec {
    /// A street lined with buildings, driven by a three-camera rig.
    pub fn street(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_57EE7);
        let mut primitives = vec![Primitive::Rect {
            axis: 2,
            offset: 0.0,
            lo: [-6.0, -10.0],
            hi: [34.0, 10.0],
            material: Material { color: [0.52, 0.5, 0.47], pattern_freq: 0.15, pattern_amp: 0.35 },
        }];
        for side in [-1.0, 1.0] {
            let mut x = -5.0;
            while x < 30.0 {
                let len = rng.random_range(2.5..4.0);
                let inner = rng.random_range(3.5..5.0);
                let height = rng.random_range(1.8..4.5);
                let (y0, y1) = if side > 0.0 { (inner, 9.0) } else { (-9.0, -inner) };
                primitives.push(Primitive::Box { lo: [x, y0, 0.0], hi: [x + len, y1, height], material: material(&mut rng) });
                x += len + rng.random_range(0.5..1.5);
            }
            for _ in 0..3 {
                let x = rng.random_range(2.0..26.0);
                let y = side * rng.random_range(2.2..2.8);
                primitives.push(Primitive::Box {
                    lo: [x, y - 0.4, 0.0],
                    hi: [x + rng.random_range(0.8..1.6), y + 0.4, rng.random_range(0.6..1.2)],
                    material: material(&mut rng),
                });
            }
        }
        primitives.push(Primitive::Box {
            lo: [31.0, -9.0, 0.0],
            hi: [32.0, 9.0, 2.5],
            material: material(&mut rng),
        });
        Self {
            seed,
            width: 64,
            height: 48,
            hfov_deg: 75.0,
            cameras: vec![
                CameraSpec { name: "front".into(), yaw_deg: 0.0, pitch_deg: 4.0, offset: [1.5, 0.0, 1.6] },
                CameraSpec { name: "front_left".into(), yaw_deg: 50.0, pitch_deg: 4.0, offset: [1.3, 0.4, 1.6] },
                CameraSpec { name: "front_right".into(), yaw_deg: -50.0, pitch_deg: 4.0, offset: [1.3, -0.4, 1.6] },
            ],
            trajectory: TrajectorySpec {
                preset: TrajectoryPreset::Arc,
                n_timestamps: 24,
                step: 0.5,
                turn_deg: 0.6,
                start: [0.0, -0.5],
            },
            primitives,
            isp: IspSpec { enabled: true, diag: 0.15, offdiag: 0.05, offset: 0.05, jitter: 0.01 },
            perturb: PerturbSpec { rot_deg: 1.0, trans: 0.05 },
            matches: MatchSpec {
                sigma_px: 0.5,
                outlier_fraction: 0.05,
                same_camera_window: 10,
                cross_camera_window: 20,
                per_pair: 40,
                min_matches: 31,
            },
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |s: String| Err(SceneError::InvalidSpec(s));
        if self.width < 2 || self.height < 2 {
            return bad(format!("image size {}x{}", self.width, self.height));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 170.0) {
            return bad(format!("hfov {}", self.hfov_deg));
        }
        if self.cameras.is_empty() || self.trajectory.n_timestamps == 0 {
            return bad("need at least one camera and one timestamp".into());
        }
        let m = &self.matches;
        if !(m.sigma_px >= 0.0) || !(0.0..=1.0).contains(&m.outlier_fraction) {
            return bad("match noise must be non-negative and outlier fraction in [0, 1]".into());
        }
        if !(self.perturb.rot_deg >= 0.0 && self.perturb.trans >= 0.0) {
            return bad("perturbation magnitudes must be non-negative".into());
        }
        let isp = &self.isp;
        if ![isp.diag, isp.offdiag, isp.offset, isp.jitter].iter().all(|v| (0.0..0.5).contains(v)) {
            return bad("isp ranges must lie in [0, 0.5)".into());
        }
        for p in &self.primitives {
            let c = p.material().color;
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return bad(format!("material color {c:?} out of gamut"));
            }
            if let Primitive::Rect { axis, .. } = p {
                if *axis > 2 {
                    return bad(format!("rect axis {axis}"));
                }
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let fx = self.width as f64 / 2.0 / (self.hfov_deg.to_radians() / 2.0).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn scene(&self) -> Scene {
        Scene { primitives: self.primitives.clone() }
    }

    /// Ground-truth rig: per-timestamp vehicle poses and per-camera offsets.
    pub fn rig(&self) -> RigState {
        // Camera axes (x right, y down, z forward) in a vehicle frame looking along +x.
        let base = Rotation3::from_matrix_unchecked(Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0));
        let deltas = self
            .cameras
            .iter()
            .map(|c| {
                let r = Rotation3::from_axis_angle(&Vector3::z_axis(), c.yaw_deg.to_radians())
                    * Rotation3::from_axis_angle(&Vector3::y_axis(), c.pitch_deg.to_radians())
                    * base;
                Pose::new(UnitQuaternion::from_rotation_matrix(&r), Vector3::from(c.offset))
            })
            .collect();
        RigState::new(self.trajectory_poses(), deltas)
    }

    fn trajectory_poses(&self) -> Vec<Pose> {
        let tr = &self.trajectory;
        let n = tr.n_timestamps;
        let turn = tr.turn_deg.to_radians();
        let heading_rate = |i: usize| match tr.preset {
            TrajectoryPreset::Straight => 0.0,
            TrajectoryPreset::Arc => turn,
            TrajectoryPreset::Turning => {
                if i >= n / 3 && i < 2 * n / 3 {
                    turn
                } else {
                    0.0
                }
            }
        };
        let mut pos = Vector3::new(tr.start[0], tr.start[1], 0.0);
        let mut heading = 0.0;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(Pose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), heading), pos));
            let next = heading + heading_rate(i);
            let mid = 0.5 * (heading + next);
            pos += Vector3::new(mid.cos(), mid.sin(), 0.0) * tr.step;
            heading = next;
        }
        out
    }

    pub fn rig_file(&self, rig: &RigState) -> RigFile {
        let names: Vec<String> = self.cameras.iter().map(|c| c.name.clone()).collect();
        let ks = vec![self.intrinsics(); self.cameras.len()];
        let stamps: Vec<f64> = (0..self.trajectory.n_timestamps).map(|i| i as f64 * 0.1).collect();
        RigFile::from_parts(rig, &ks, &names, &stamps)
    }
}

/// Independent random stream for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.set_word_pos(index as u128 * (1 << 20));
    rng
}

const STREAM_ISP: u64 = 1;
const STREAM_ISP_JITTER: u64 = 2;
const STREAM_MATCHES: u64 = 3;
const STREAM_PERTURB: u64 = 4;

fn near_identity(rng: &mut ChaCha8Rng, diag: f64, offdiag: f64, offset: f64) -> Affine {
    let mut sym = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
    let matrix = Matrix3::from_fn(|r, c| if r == c { 1.0 + sym(diag) } else { sym(offdiag) });
    let offset = Vector3::new(sym(offset), sym(offset), sym(offset));
    Affine { matrix, offset }
}

/// Ground-truth (fg, sky) color transforms for every image, frame order.
pub fn isp_transforms(spec: &SceneSpec) -> Vec<(Affine, Affine)> {
    let n_c = spec.cameras.len();
    let n_t = spec.trajectory.n_timestamps;
    if !spec.isp.enabled {
        return vec![(Affine::identity(), Affine::identity()); n_c * n_t];
    }
    let isp = spec.isp;
    let per_camera: Vec<(Affine, Affine)> = (0..n_c)
        .map(|k| {
            let mut rng = substream(spec.seed, STREAM_ISP, k as u64);
            let fg = near_identity(&mut rng, isp.diag, isp.offdiag, isp.offset);
            let sky = near_identity(&mut rng, isp.diag, isp.offdiag, isp.offset);
            (fg, sky)
        })
        .collect();
    let mut out = Vec::with_capacity(n_c * n_t);
    for t in 0..n_t {
        for (k, (fg, sky)) in per_camera.iter().enumerate() {
            let mut rng = substream(spec.seed, STREAM_ISP_JITTER, (t * n_c + k) as u64);
            let mut jitter = |base: &Affine| {
                let j = near_identity(&mut rng, isp.jitter, 0.0, isp.jitter);
                Affine { matrix: base.matrix + j.matrix - Matrix3::identity(), offset: base.offset + j.offset }
            };
            out.push((jitter(fg), jitter(sky)));
        }
    }
    out
}

/// Rendered rasters of one view.
pub struct RenderedView {
    pub clean: Image,
    pub distorted: Image,
    pub depth: DepthMap,
    pub sky: Bitmap,
}

fn to_f32(v: &Vector3<f64>) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

/// Renders one view by analytic ray casting. Depth is z-depth; sky pixels
/// have invalid depth and a set sky bit. Colors are quantized to 8 bits.
pub fn render_view(scene: &Scene, k: &Intrinsics, pose: &Pose, fg_tf: &Affine, sky_tf: &Affine) -> RenderedView {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut clean = Image::new(w, h);
    let mut distorted = Image::new(w, h);
    let mut depth = DepthMap::invalid(w, h);
    let mut sky = Bitmap::new(w, h, false);
    let r = pose.rotation_matrix();
    for y in 0..h {
        for x in 0..w {
            let dir = r * k.ray_direction(&Vector2::new(x as f64, y as f64));
            match scene.raycast(&pose.translation, &dir) {
                Some(hit) => {
                    let c = scene.shade(&hit, &(pose.translation + dir * hit.t));
                    clean.set(x, y, to_f32(&c));
                    distorted.set(x, y, to_f32(&fg_tf.apply(&c)));
                    depth.set(x, y, hit.t as f32);
                }
                None => {
                    let c = sky_color(&dir);
                    clean.set(x, y, to_f32(&c));
                    distorted.set(x, y, to_f32(&sky_tf.apply(&c)));
                    sky.set(x, y, true);
                }
            }
        }
    }
    RenderedView { clean: clean.quantized(), distorted: distorted.clamped().quantized(), depth, sky }
}

/// Renders every (timestamp, camera) view of the spec under the true rig.
pub fn render_ground_truth(spec: &SceneSpec) -> Result<(RigState, Vec<Frame>, Vec<IspRecord>), SceneError> {
    spec.validate()?;
    let rig = spec.rig();
    let k = spec.intrinsics();
    let scene = spec.scene();
    let isp = isp_transforms(spec);
    let gray = Vector3::repeat(0.5);
    for (fg, sky) in &isp {
        for tf in [fg, sky] {
            if !tf.apply(&gray).iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(SceneError::InvalidSpec("color distortion maps mid-gray out of gamut".into()));
            }
        }
    }
    let n_c = spec.cameras.len();
    let views: Vec<(usize, usize)> =
        (0..spec.trajectory.n_timestamps).flat_map(|t| (0..n_c).map(move |c| (t, c))).collect();
    let frames = views
        .par_iter()
        .map(|&(t, c)| {
            let pose = rig.camera_pose(t, c)?;
            let (fg, sky) = &isp[t * n_c + c];
            let v = render_view(&scene, &k, &pose, fg, sky);
            Ok(Frame { timestamp: t, camera: c, image: v.distorted, clean: Some(v.clean), depth: Some(v.depth), sky: Some(v.sky) })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    let records = views
        .iter()
        .zip(&isp)
        .map(|(&(timestamp, camera), (fg, sky))| IspRecord { timestamp, camera, fg: fg.into(), sky: AffineRecord::from(sky) })
        .collect();
    Ok((rig, frames, records))
}

/// Whether `point` is the first surface hit seen from `centre`.
fn visible_from(scene: &Scene, centre: &Vector3<f64>, point: &Vector3<f64>, primitive: usize) -> bool {
    match scene.raycast(centre, &(point - centre)) {
        Some(hit) => hit.primitive == primitive && (hit.t - 1.0).abs() < 1e-6,
        None => false,
    }
}

/// Synthetic matches under the true rig.
///
/// Each view is paired with later views of the same camera within
/// `same_camera_window` timestamps and with other cameras within
/// `cross_camera_window`, including the same timestamp. Source pixels are drawn uniformly; a
/// match is kept when its surface point is unoccluded and in bounds in the
/// destination. Gaussian noise is added to the destination pixel only, and
/// an `outlier_fraction` of matches get a uniformly random destination.
pub fn make_correspondences(
    scene: &Scene,
    rig: &RigState,
    intrinsics: &[Intrinsics],
    spec: &MatchSpec,
    seed: u64,
) -> Result<CorrespondenceGraph, SceneError> {
    let (n_t, n_c) = (rig.n_timestamps(), rig.n_cameras());
    let mut pairs = Vec::new();
    for i in 0..n_t {
        for k in 0..n_c {
            for j in i..n_t {
                for l in 0..n_c {
                    let window = if l == k { spec.same_camera_window } else { spec.cross_camera_window };
                    if j - i > window || (j == i && l <= k) {
                        continue;
                    }
                    pairs.push((ViewId::new(i, k), ViewId::new(j, l)));
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.sigma_px.max(0.0)).map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
    let per_pair: Vec<Vec<CorrespondenceEdge>> = pairs
        .par_iter()
        .enumerate()
        .map(|(n, &(src, dst))| {
            let mut rng = substream(seed, STREAM_MATCHES, n as u64);
            let src_pose = rig.camera_pose(src.timestamp, src.camera)?;
            let dst_pose = rig.camera_pose(dst.timestamp, dst.camera)?;
            let (ks, kd) = (&intrinsics[src.camera], &intrinsics[dst.camera]);
            let world_to_dst = dst_pose.inverse();
            let r_src = src_pose.rotation_matrix();
            let mut edges = Vec::new();
            for _ in 0..spec.per_pair * 4 {
                if edges.len() == spec.per_pair {
                    break;
                }
                let q = Vector2::new(
                    rng.random_range(0.0..ks.width as f64 - 1.0),
                    rng.random_range(0.0..ks.height as f64 - 1.0),
                );
                let dir = r_src * ks.ray_direction(&q);
                let Some(hit) = scene.raycast(&src_pose.translation, &dir) else { continue };
                let point = src_pose.translation + dir * hit.t;
                let Ok(p) = project(kd, &world_to_dst.transform_point(&point)) else { continue };
                if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= kd.width as f64 - 1.0 && p.y <= kd.height as f64 - 1.0) {
                    continue;
                }
                if !visible_from(scene, &dst_pose.translation, &point, hit.primitive) {
                    continue;
                }
                let p = if rng.random::<f64>() < spec.outlier_fraction {
                    Vector2::new(rng.random_range(0.0..kd.width as f64 - 1.0), rng.random_range(0.0..kd.height as f64 - 1.0))
                } else {
                    p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                };
                edges.push(CorrespondenceEdge { src, dst, q, p, depth_q: hit.t, weight: 1.0 });
            }
            if edges.len() < spec.min_matches {
                edges.clear();
            }
            Ok(edges)
        })
        .collect::<Result<_, SceneError>>()?;
    let edges: Vec<CorrespondenceEdge> = per_pair.into_iter().flatten().collect();
    if edges.is_empty() {
        return Err(SceneError::NoOverlap);
    }
    Ok(CorrespondenceGraph::new(edges, n_t, n_c)?)
}

/// Rotates every camera offset except camera 0 by exactly `rot_deg` about
/// a random axis and shifts it by exactly `trans` in a random direction.
pub fn perturb_rig(rig: &RigState, rot_deg: f64, trans: f64, seed: u64) -> RigState {
    let mut out = rig.clone();
    for (k, delta) in out.deltas.iter_mut().enumerate().skip(1) {
        let mut rng = substream(seed, STREAM_PERTURB, k as u64);
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let rot = UnitQuaternion::from_scaled_axis(Vector3::from(axis) * rot_deg.to_radians());
        *delta = Pose::new(rot * delta.rotation, delta.translation + Vector3::from(dir) * trans);
    }
    out
}

/// Renders the spec and derives everything a pipeline run needs.
pub fn generate(spec: &SceneSpec) -> Result<Dataset, SceneError> {
    let (rig, frames, isp) = render_ground_truth(spec)?;
    let ks = vec![spec.intrinsics(); spec.cameras.len()];
    let graph = make_correspondences(&spec.scene(), &rig, &ks, &spec.matches, spec.seed)?;
    let init = perturb_rig(&rig, spec.perturb.rot_deg, spec.perturb.trans, spec.seed);
    Ok(Dataset {
        rig_true: spec.rig_file(&rig),
        rig_init: Some(spec.rig_file(&init)),
        frames,
        isp: Some(isp),
        graph: Some(graph),
        spec_json: Some(serde_json::to_string_pretty(spec).expect("spec serializes")),
    })
}
