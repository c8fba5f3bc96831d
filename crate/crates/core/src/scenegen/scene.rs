use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};

/// Lambertian surface with a smooth two-axis sinusoidal pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub color: [f64; 3],
    /// Pattern cycles per scene unit.
    pub pattern_freq: f64,
    /// Fraction of the base color modulated by the pattern.
    pub pattern_amp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned rectangle at `coord[axis] = offset`; `lo`/`hi` bound the
    /// two remaining coordinates in increasing axis order.
    Rect { axis: usize, offset: f64, lo: [f64; 2], hi: [f64; 2], material: Material },
    Box { lo: [f64; 3], hi: [f64; 3], material: Material },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals z-depth when the direction has unit camera z.
    pub t: f64,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

const HIT_EPS: f64 = 1e-9;
const LIGHT: [f64; 3] = [0.3, 0.5, 0.8];

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

impl Primitive {
    pub fn material(&self) -> &Material {
        match self {
            Primitive::Rect { material, .. } | Primitive::Box { material, .. } => material,
        }
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match *self {
            Primitive::Rect { axis, offset, lo, hi, .. } => {
                if d[axis].abs() < 1e-300 {
                    return None;
                }
                let t = (offset - o[axis]) / d[axis];
                if t <= HIT_EPS {
                    return None;
                }
                let p = o + d * t;
                let (a, b) = other_axes(axis);
                if p[a] < lo[0] || p[a] > hi[0] || p[b] < lo[1] || p[b] > hi[1] {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                Some((t, n))
            }
            Primitive::Box { lo, hi, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut entry_axis = 0;
                for a in 0..3 {
                    if d[a].abs() < 1e-300 {
                        if o[a] < lo[a] || o[a] > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut near, mut far) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                    }
                    if near > t0 {
                        t0 = near;
                        entry_axis = a;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= HIT_EPS {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[entry_axis] = -d[entry_axis].signum();
                Some((t0, n))
            }
        }
    }
}

/// Analytic scene: primitives plus a procedural sky.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// Closest hit along `o + t·d`, `t > 0`.
    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (primitive, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, normal, primitive });
                }
            }
        }
        best
    }

    /// Shaded surface color at a hit point.
    pub fn shade(&self, hit: &Hit, point: &Vector3<f64>) -> Vector3<f64> {
        let m = self.primitives[hit.primitive].material();
        let axis = (0..3).find(|&a| hit.normal[a] != 0.0).unwrap_or(2);
        let (a, b) = other_axes(axis);
        let f = m.pattern_freq * TAU;
        let pattern = 0.5 + 0.25 * (f * point[a]).sin() + 0.25 * (f * point[b] + 1.3).sin();
        let light = Vector3::from(LIGHT).normalize();
        let shading = 0.65 + 0.35 * hit.normal.dot(&light).max(0.0);
        let scale = (1.0 - m.pattern_amp + m.pattern_amp * pattern) * shading;
        Vector3::from(m.color).map(|c| (c * scale).clamp(0.0, 1.0))
    }
}

/// Smooth horizon-to-zenith gradient with a gentle azimuthal variation.
pub fn sky_color(dir: &Vector3<f64>) -> Vector3<f64> {
    let d = dir.normalize();
    let elevation = d.z.clamp(-1.0, 1.0).asin();
    let azimuth = d.y.atan2(d.x);
    let horizon = Vector3::new(0.86, 0.88, 0.93);
    let zenith = Vector3::new(0.32, 0.52, 0.86);
    let below = Vector3::new(0.62, 0.62, 0.66);
    let base = if elevation >= 0.0 {
        let s = (elevation / FRAC_PI_2).sqrt();
        horizon * (1.0 - s) + zenith * s
    } else {
        let s = (-elevation / FRAC_PI_2).min(1.0);
        horizon * (1.0 - s) + below * s
    };
    let wobble = 0.04 * (2.0 * azimuth).sin() * elevation.cos();
    base.map(|c| (c + wobble).clamp(0.0, 1.0))
}
