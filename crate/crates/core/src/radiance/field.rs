use nalgebra::Vector3;
use std::f64::consts::{FRAC_PI_2, PI};

use super::RadianceError;

/// Channels stored per grid node: raw density then raw RGB.
pub const GRID_CHANNELS: usize = 4;
pub const SKY_CHANNELS: usize = 3;
const OPACITY_EPS: f64 = 1e-10;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`], for initializing raw values from target colors.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Result<Self, RadianceError> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(RadianceError::InvalidRay(format!("direction {direction:?}")));
        }
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(RadianceError::InvalidRay(format!("near {near}, far {far}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(RadianceError::InvalidRay(format!("origin {origin:?}")));
        }
        Ok(Self { origin, direction: direction / n, near, far })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, RadianceError> {
        if (0..3).any(|a| !(max[a] > min[a])) {
            return Err(RadianceError::InvalidConfig(format!("empty bounds {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Parametric entry/exit of the ray, clipped to `[near, far]`.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (ray.near, ray.far);
        for a in 0..3 {
            let d = ray.direction[a];
            let o = ray.origin[a];
            if d.abs() < 1e-300 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[a] - o) / d, (self.max[a] - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Interpolation taps for one lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps<const N: usize> {
    pub index: [usize; N],
    pub weight: [f64; N],
}

/// Dense node grid over a box; node `(i, j, k)` sits at
/// `min + (i, j, k) ⊙ extent / (res − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub res: [usize; 3],
    pub bounds: Aabb,
    /// Node-major, [`GRID_CHANNELS`] raw values per node.
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(res: [usize; 3], bounds: Aabb, density_raw: f64, color_raw: f64) -> Result<Self, RadianceError> {
        if res.iter().any(|&r| r < 2) {
            return Err(RadianceError::InvalidConfig(format!("grid resolution {res:?} must be ≥ 2 per axis")));
        }
        let n = res[0] * res[1] * res[2];
        let mut values = vec![color_raw; n * GRID_CHANNELS];
        for node in values.chunks_exact_mut(GRID_CHANNELS) {
            node[0] = density_raw;
        }
        Ok(Self { res, bounds, values })
    }

    pub fn node_count(&self) -> usize {
        self.res[0] * self.res[1] * self.res[2]
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.res[1] + j) * self.res[0] + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let ext = self.bounds.max - self.bounds.min;
        let f = |c: usize, a: usize| self.bounds.min[a] + ext[a] * c as f64 / (self.res[a] - 1) as f64;
        Vector3::new(f(i, 0), f(j, 1), f(k, 2))
    }

    /// Trilinear taps; positions outside the box clamp to its faces.
    pub fn taps(&self, p: &Vector3<f64>) -> Taps<8> {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let cells = (self.res[a] - 1) as f64;
            let u = ((p[a] - self.bounds.min[a]) / (self.bounds.max[a] - self.bounds.min[a]) * cells).clamp(0.0, cells);
            let i0 = (u.floor() as usize).min(self.res[a] - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let mut index = [0; 8];
        let mut weight = [0.0; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            index[c] = self.node_index(base[0] + dx, base[1] + dy, base[2] + dz);
            let w = |d: usize, f: f64| if d == 1 { f } else { 1.0 - f };
            weight[c] = w(dx, frac[0]) * w(dy, frac[1]) * w(dz, frac[2]);
        }
        Taps { index, weight }
    }

    /// Interpolated raw values at `p`.
    pub fn raw_at(&self, taps: &Taps<8>) -> [f64; GRID_CHANNELS] {
        let mut out = [0.0; GRID_CHANNELS];
        for (&n, &w) in taps.index.iter().zip(&taps.weight) {
            let v = &self.values[n * GRID_CHANNELS..(n + 1) * GRID_CHANNELS];
            for c in 0..GRID_CHANNELS {
                out[c] += w * v[c];
            }
        }
        out
    }
}

/// Equirectangular map of raw sky colors indexed by world direction
/// (z up): columns span longitude `atan2(y, x)`, rows span latitude from
/// +90° at the top to −90° at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SkyMap {
    pub fn new(width: usize, height: usize, color_raw: f64) -> Result<Self, RadianceError> {
        if width < 2 || height < 2 {
            return Err(RadianceError::InvalidConfig(format!("sky map {width}x{height} too small")));
        }
        Ok(Self { width, height, values: vec![color_raw; width * height * SKY_CHANNELS] })
    }

    /// Direction of the centre of texel `(u, v)`.
    pub fn texel_direction(&self, u: usize, v: usize) -> Vector3<f64> {
        let lon = (u as f64 + 0.5) / self.width as f64 * 2.0 * PI - PI;
        let lat = FRAC_PI_2 - (v as f64 + 0.5) / self.height as f64 * PI;
        Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
    }

    /// Bilinear taps, wrapping in longitude and clamping at the poles.
    pub fn taps(&self, dir: &Vector3<f64>) -> Taps<4> {
        let d = dir.normalize();
        let lon = d.y.atan2(d.x);
        let lat = d.z.clamp(-1.0, 1.0).asin();
        let u = (lon + PI) / (2.0 * PI) * self.width as f64 - 0.5;
        let v = (FRAC_PI_2 - lat) / PI * self.height as f64 - 0.5;
        let x0f = u.floor();
        let fx = u - x0f;
        let w = self.width as i64;
        let x0 = (x0f as i64).rem_euclid(w) as usize;
        let x1 = (x0 + 1) % self.width;
        let (y0, y1, fy) = if v <= 0.0 {
            (0, 0, 0.0)
        } else if v >= (self.height - 1) as f64 {
            (self.height - 1, self.height - 1, 0.0)
        } else {
            let y0 = v.floor() as usize;
            (y0, y0 + 1, v - y0 as f64)
        };
        Taps {
            index: [y0 * self.width + x0, y0 * self.width + x1, y1 * self.width + x0, y1 * self.width + x1],
            weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    pub fn raw_at(&self, taps: &Taps<4>) -> [f64; SKY_CHANNELS] {
        let mut out = [0.0; SKY_CHANNELS];
        for (&n, &w) in taps.index.iter().zip(&taps.weight) {
            for c in 0..SKY_CHANNELS {
                out[c] += w * self.values[n * SKY_CHANNELS + c];
            }
        }
        out
    }

    pub fn lookup(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let raw = self.raw_at(&self.taps(dir));
        Vector3::new(sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2]))
    }
}

/// Foreground voxel field plus a direction-only sky layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredRadianceField {
    pub fg: VoxelGrid,
    pub sky: SkyMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOutput {
    pub fg: Vector3<f64>,
    /// Accumulated foreground weight.
    pub opacity: f64,
    pub sky: Vector3<f64>,
    pub depth: f64,
}

/// Per-sample forward state kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct RaySample {
    pub t: f64,
    pub delta: f64,
    pub taps: Taps<8>,
    pub density_raw: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Transmittance before this sample.
    pub transmittance: f64,
    pub color: Vector3<f64>,
}

/// Forward state of one ray.
#[derive(Debug, Clone, Default)]
pub struct RayTrace {
    pub samples: Vec<RaySample>,
    pub sky_taps: Option<Taps<4>>,
    pub sky_color: Vector3<f64>,
    /// Transmittance after the last sample.
    pub residual_transmittance: f64,
}

impl LayeredRadianceField {
    /// Renders with samples at the centres of `n_samples` equal bins.
    pub fn render_ray(&self, ray: &Ray, n_samples: usize) -> Result<RenderOutput, RadianceError> {
        let mut trace = RayTrace::default();
        self.render_traced(ray, n_samples, 0.5, &mut trace)
    }

    /// Renders with one sample per bin at relative offset `jitter ∈ [0, 1)`
    /// over the part of the ray inside the grid bounds, recording the state
    /// needed by [`Self::backward_ray`].
    pub fn render_traced(
        &self,
        ray: &Ray,
        n_samples: usize,
        jitter: f64,
        trace: &mut RayTrace,
    ) -> Result<RenderOutput, RadianceError> {
        if n_samples == 0 {
            return Err(RadianceError::InvalidRay("n_samples must be ≥ 1".into()));
        }
        trace.samples.clear();
        let mut fg = Vector3::zeros();
        let mut opacity = 0.0;
        let mut depth_acc = 0.0;
        let mut transmittance = 1.0;
        if let Some((t0, t1)) = self.fg.bounds.clip(ray) {
            let delta = (t1 - t0) / n_samples as f64;
            for n in 0..n_samples {
                let t = t0 + (n as f64 + jitter) * delta;
                let taps = self.fg.taps(&ray.at(t));
                let raw = self.fg.raw_at(&taps);
                let sigma = softplus(raw[0]);
                let alpha = 1.0 - (-sigma * delta).exp();
                let color = Vector3::new(sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3]));
                let w = transmittance * alpha;
                fg += color * w;
                opacity += w;
                depth_acc += w * t;
                trace.samples.push(RaySample {
                    t,
                    delta,
                    taps,
                    density_raw: raw[0],
                    sigma,
                    alpha,
                    transmittance,
                    color,
                });
                transmittance *= 1.0 - alpha;
            }
        }
        let sky_taps = self.sky.taps(&ray.direction);
        let raw = self.sky.raw_at(&sky_taps);
        let sky = Vector3::new(sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2]));
        trace.sky_taps = Some(sky_taps);
        trace.sky_color = sky;
        trace.residual_transmittance = transmittance;
        Ok(RenderOutput { fg, opacity, sky, depth: depth_acc / opacity.max(OPACITY_EPS) })
    }

    /// Accumulates parameter gradients of a ray given the upstream
    /// gradients with respect to `fg`, `opacity` and `sky`.
    pub fn backward_ray(
        &self,
        trace: &RayTrace,
        d_fg: &Vector3<f64>,
        d_opacity: f64,
        d_sky: &Vector3<f64>,
        grad_fg: &mut [f64],
        grad_sky: &mut [f64],
    ) {
        // L = Σ w_m s_m with s_m = d_fg·c_m + d_opacity; the suffix sum holds Σ_{m>n} w_m s_m.
        let mut suffix = 0.0;
        for s in trace.samples.iter().rev() {
            let w = s.transmittance * s.alpha;
            let score = d_fg.dot(&s.color) + d_opacity;
            let after = s.transmittance * (1.0 - s.alpha);
            let d_sigma = s.delta * (after * score - suffix);
            suffix += w * score;
            let d_density_raw = d_sigma * sigmoid(s.density_raw);
            let d_color_raw = d_fg.component_mul(&s.color.map(|c| c * (1.0 - c))) * w;
            let d_raw = [d_density_raw, d_color_raw.x, d_color_raw.y, d_color_raw.z];
            for (&n, &tw) in s.taps.index.iter().zip(&s.taps.weight) {
                let g = &mut grad_fg[n * GRID_CHANNELS..(n + 1) * GRID_CHANNELS];
                for c in 0..GRID_CHANNELS {
                    g[c] += tw * d_raw[c];
                }
            }
        }
        if let Some(taps) = &trace.sky_taps {
            let c = trace.sky_color;
            let d_raw = d_sky.component_mul(&c.map(|v| v * (1.0 - v)));
            for (&n, &tw) in taps.index.iter().zip(&taps.weight) {
                for ch in 0..SKY_CHANNELS {
                    grad_sky[n * SKY_CHANNELS + ch] += tw * d_raw[ch];
                }
            }
        }
    }
}
