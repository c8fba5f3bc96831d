//! Rigid transforms, pinhole cameras and rig pose composition.
//!
//! Poses are camera-to-world. Camera frames follow the usual computer-vision
//! convention (x right, y down, z forward) and pixel coordinates are
//! continuous with `(0, 0)` at the center of the top-left pixel.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("index out of range: {what} {index} (len {len})")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rig document: {0}")]
    InvalidRig(String),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Whether a continuous pixel rounds to a pixel inside the image.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        self.nearest_pixel(pixel).is_some()
    }

    /// Nearest integer pixel `(col, row)` if it lies inside the image.
    pub fn nearest_pixel(&self, pixel: &Vector2<f64>) -> Option<(usize, usize)> {
        let u = pixel.x.round();
        let v = pixel.y.round();
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }

    /// Camera-frame ray direction (z = 1) through a pixel.
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project(k: &Intrinsics, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if !(p_cam.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p_cam.z));
    }
    Ok(Vector2::new(k.fx * p_cam.x / p_cam.z + k.cx, k.fy * p_cam.y / p_cam.z + k.cy))
}

/// Back-projects a pixel at z-depth `depth` into the camera frame.
pub fn unproject(k: &Intrinsics, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(k.ray_direction(pixel) * depth)
}

/// Rigid transform stored as a unit quaternion and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation }
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self { rotation, translation: Vector3::from(t) }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        Pose {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose { rotation: r, translation: -(r * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Left increment `exp(δ) ∘ self` with `δ = (ω, v)`: rotation by the
    /// axis-angle vector `ω` followed by a translation `v`.
    pub fn left_update(&self, delta: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let inc = Pose { rotation: UnitQuaternion::from_scaled_axis(omega), translation: v };
        inc.compose(self)
    }

    /// Rotation angle of `self⁻¹ ∘ other` in radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.inverse() * other.rotation))
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Centre distance plus rotation angle (one radian counts as one unit),
    /// used to rank views by similarity.
    pub fn view_distance(&self, other: &Pose) -> f64 {
        self.distance_to(other) + self.angle_to(other)
    }
}

/// Per-timestamp ego poses and per-camera fixed offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RigState {
    pub ego_poses: Vec<Pose>,
    pub deltas: Vec<Pose>,
}

impl RigState {
    pub fn new(ego_poses: Vec<Pose>, deltas: Vec<Pose>) -> Self {
        Self { ego_poses, deltas }
    }

    pub fn n_timestamps(&self) -> usize {
        self.ego_poses.len()
    }

    pub fn n_cameras(&self) -> usize {
        self.deltas.len()
    }

    /// Camera-to-world pose of camera `k` at timestamp `i`.
    pub fn camera_pose(&self, i: usize, k: usize) -> Result<Pose, GeometryError> {
        let ego = self.ego_poses.get(i).ok_or(GeometryError::IndexOutOfRange {
            what: "timestamp",
            index: i,
            len: self.ego_poses.len(),
        })?;
        let delta = self.deltas.get(k).ok_or(GeometryError::IndexOutOfRange {
            what: "camera",
            index: k,
            len: self.deltas.len(),
        })?;
        Ok(ego.compose(delta))
    }

    /// Applies the rig gauge `T^i → T^i ∘ g`, `ΔT_k → g⁻¹ ∘ ΔT_k`.
    pub fn gauge_transformed(&self, g: &Pose) -> RigState {
        let g_inv = g.inverse();
        RigState {
            ego_poses: self.ego_poses.iter().map(|t| t.compose(g)).collect(),
            deltas: self.deltas.iter().map(|d| g_inv.compose(d)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        Self { quat: p.wxyz(), trans: p.translation.into() }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        Pose::from_wxyz(r.quat, r.trans)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub delta: PoseRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoRecord {
    pub timestamp: f64,
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

/// On-disk rig and trajectory document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub cameras: Vec<CameraRecord>,
    pub ego_poses: Vec<EgoRecord>,
}

impl RigFile {
    pub fn from_parts(rig: &RigState, intrinsics: &[Intrinsics], names: &[String], timestamps: &[f64]) -> Self {
        let cameras = rig
            .deltas
            .iter()
            .zip(intrinsics)
            .zip(names)
            .map(|((d, k), name)| CameraRecord { name: name.clone(), intrinsics: *k, delta: d.into() })
            .collect();
        let ego_poses = rig
            .ego_poses
            .iter()
            .zip(timestamps)
            .map(|(p, &timestamp)| EgoRecord { timestamp, quat: p.wxyz(), trans: p.translation.into() })
            .collect();
        Self { cameras, ego_poses }
    }

    pub fn rig(&self) -> RigState {
        RigState {
            ego_poses: self.ego_poses.iter().map(|e| Pose::from_wxyz(e.quat, e.trans)).collect(),
            deltas: self.cameras.iter().map(|c| Pose::from(&c.delta)).collect(),
        }
    }

    pub fn intrinsics(&self) -> Vec<Intrinsics> {
        self.cameras.iter().map(|c| c.intrinsics).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.cameras.iter().map(|c| c.name.clone()).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.ego_poses.iter().map(|e| e.timestamp).collect()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.cameras.is_empty() {
            return Err(GeometryError::InvalidRig("no cameras".into()));
        }
        for c in &self.cameras {
            c.intrinsics.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rig document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let doc: RigFile = serde_json::from_str(text).map_err(|e| GeometryError::InvalidRig(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }
}

/// Rotation angle in radians, accurate near zero.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn rz(angle: f64, t: [f64; 3]) -> Pose {
        Pose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle), Vector3::from(t))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-5.0..5.0f64))
            .prop_map(|(w, t)| Pose::new(UnitQuaternion::from_scaled_axis(Vector3::from(w)), Vector3::from(t)))
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = rz(0.3, [1.0, -2.0, 0.5]);
        let id = Pose::identity();
        let a = id.compose(&t);
        assert_relative_eq!(a.translation, t.translation, epsilon = 1e-12);
        assert!(a.angle_to(&t) < 1e-12);
        let e = t.compose(&t.inverse());
        assert!(e.translation.norm() < 1e-9);
        assert!(rotation_angle(&e.rotation) < 1e-9);
    }

    #[test]
    fn compose_quarter_turns_matches_matrix_product() {
        let a = rz(FRAC_PI_2, [1.0, 0.0, 0.0]);
        let b = rz(FRAC_PI_2, [0.0, 1.0, 0.0]);
        let c = a.compose(&b);
        assert!((rotation_angle(&c.rotation) - std::f64::consts::PI).abs() < 1e-9);
        assert!(c.translation.norm() < 1e-9);
        let m = a.to_matrix() * b.to_matrix();
        assert_relative_eq!(c.to_matrix(), m, epsilon = 1e-9);
    }

    #[test]
    fn project_examples() {
        let k = k100();
        assert_eq!(project(&k, &Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(50.0, 50.0));
        assert_eq!(project(&k, &Vector3::new(1.0, 0.0, 2.0)).unwrap(), Vector2::new(100.0, 50.0));
        assert!(matches!(project(&k, &Vector3::new(0.0, 0.0, -1.0)), Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn unproject_examples() {
        let k = k100();
        assert_eq!(unproject(&k, &Vector2::new(50.0, 50.0), 1.0).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(unproject(&k, &Vector2::new(100.0, 50.0), 2.0).unwrap(), Vector3::new(1.0, 0.0, 2.0));
        assert!(unproject(&k, &Vector2::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn camera_pose_examples() {
        let rig = RigState::new(
            vec![Pose::from_translation(Vector3::new(1.0, 2.0, 3.0))],
            vec![Pose::identity(), Pose::from_translation(Vector3::new(0.5, 0.0, 0.0))],
        );
        assert_eq!(rig.camera_pose(0, 0).unwrap(), rig.ego_poses[0]);
        let p = rig.camera_pose(0, 1).unwrap();
        assert_relative_eq!(p.translation, Vector3::new(1.5, 2.0, 3.0), epsilon = 1e-12);
        assert!(matches!(rig.camera_pose(1, 0), Err(GeometryError::IndexOutOfRange { .. })));
        assert!(matches!(rig.camera_pose(0, 2), Err(GeometryError::IndexOutOfRange { .. })));
    }

    #[test]
    fn rig_file_round_trip() {
        let rig = RigState::new(vec![rz(0.2, [1.0, 0.0, 0.0])], vec![rz(-0.1, [0.0, 0.3, 1.5])]);
        let doc = RigFile::from_parts(&rig, &[k100()], &["front".to_string()], &[0.0]);
        let back = RigFile::from_json(&doc.to_json()).unwrap();
        let rig2 = back.rig();
        assert!(rig2.ego_poses[0].angle_to(&rig.ego_poses[0]) < 1e-12);
        assert_relative_eq!(rig2.deltas[0].translation, rig.deltas[0].translation);
        assert_eq!(back.names(), vec!["front".to_string()]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn compose_agrees_with_homogeneous_matrices(a in arb_pose(), b in arb_pose()) {
            let c = a.compose(&b);
            let m = a.to_matrix() * b.to_matrix();
            prop_assert!((c.to_matrix() - m).abs().max() < 1e-9);
            prop_assert!((c.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.translation - r.translation).norm() < 1e-9);
            prop_assert!(l.angle_to(&r) < 1e-9);
        }

        #[test]
        fn unproject_then_project_is_identity(u in 0.0..100.0f64, v in 0.0..100.0f64, d in 0.01..100.0f64) {
            let k = k100();
            let px = Vector2::new(u, v);
            let back = project(&k, &unproject(&k, &px, d).unwrap()).unwrap();
            prop_assert!((back - px).norm() < 1e-9);
        }

        #[test]
        fn camera_pose_is_gauge_invariant(ego in arb_pose(), delta in arb_pose(), g in arb_pose()) {
            let rig = RigState::new(vec![ego], vec![delta]);
            let moved = rig.gauge_transformed(&g);
            let a = rig.camera_pose(0, 0).unwrap();
            let b = moved.camera_pose(0, 0).unwrap();
            prop_assert!((a.translation - b.translation).norm() < 1e-9);
            prop_assert!(a.angle_to(&b) < 1e-9);
        }
    }
}
