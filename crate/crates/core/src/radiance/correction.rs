use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::RadianceError;

pub const CODE_DIM: usize = 4;
/// Decoder output: a row-major 3×3 residual matrix then a 3-vector offset.
pub const AFFINE_PARAMS: usize = 12;
pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];

/// Fully connected ReLU network with a linear output layer. Parameters are
/// stored flat, layer by layer, as a row-major weight matrix followed by
/// the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input followed by each hidden layer's post-ReLU output.
    layers: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self { sizes: sizes.to_vec(), params: vec![0.0; n] }
    }

    /// He-initialized hidden layers and an all-zero output layer.
    pub fn residual_init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros(sizes);
        let last = sizes.len() - 2;
        for l in 0..last {
            let (fan_in, offset) = (sizes[l], mlp.offset(l));
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for w in &mut mlp.params[offset..offset + sizes[l] * sizes[l + 1]] {
                *w = normal.sample(rng);
            }
        }
        mlp
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..layer + 1].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameter range of the last layer.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        self.offset(self.sizes.len() - 2)..self.params.len()
    }

    pub fn forward(&self, input: &[f64]) -> MlpTrace {
        debug_assert_eq!(input.len(), self.sizes[0]);
        let mut layers = vec![input.to_vec()];
        let n_layers = self.sizes.len() - 1;
        let mut output = Vec::new();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let x = layers.last().expect("input layer");
            let y: Vec<f64> =
                (0..n_out).map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
            if l + 1 == n_layers {
                output = y;
            } else {
                layers.push(y.into_iter().map(|v| v.max(0.0)).collect());
            }
        }
        MlpTrace { layers, output }
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, trace: &MlpTrace, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut upstream = d_output.to_vec();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let x = &trace.layers[l];
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                let g = upstream[o];
                if g == 0.0 {
                    continue;
                }
                let row = off + o * n_in;
                for i in 0..n_in {
                    grad[row + i] += g * x[i];
                    d_in[i] += g * self.params[row + i];
                }
                grad[off + n_in * n_out + o] += g;
            }
            if l > 0 {
                // Through the ReLU that produced this layer's input.
                for (d, &a) in d_in.iter_mut().zip(x) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            upstream = d_in;
        }
        upstream
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Foreground,
    Sky,
}

/// `v ↦ matrix·v + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub matrix: Matrix3<f64>,
    pub offset: Vector3<f64>,
}

impl Affine {
    pub fn identity() -> Self {
        Self { matrix: Matrix3::identity(), offset: Vector3::zeros() }
    }

    pub fn zero() -> Self {
        Self { matrix: Matrix3::zeros(), offset: Vector3::zeros() }
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v + self.offset
    }

    /// Identity plus the residual encoded in a decoder output.
    pub fn from_residual(out: &[f64]) -> Self {
        Self {
            matrix: Matrix3::identity() + Matrix3::from_row_slice(&out[..9]),
            offset: Vector3::new(out[9], out[10], out[11]),
        }
    }

    /// Flattens a gradient in the decoder output layout.
    pub fn to_output_layout(&self) -> [f64; AFFINE_PARAMS] {
        let mut out = [0.0; AFFINE_PARAMS];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.matrix[(r, c)];
            }
            out[9 + r] = self.offset[r];
        }
        out
    }

    /// L1 distance to the identity transform.
    pub fn deviation_l1(&self) -> f64 {
        (self.matrix - Matrix3::identity()).abs().sum() + self.offset.abs().sum()
    }

    /// Subgradient of [`Self::deviation_l1`].
    pub fn deviation_l1_grad(&self) -> Affine {
        Affine {
            matrix: (self.matrix - Matrix3::identity()).map(sign),
            offset: self.offset.map(sign),
        }
    }

    pub fn add_scaled(&mut self, other: &Affine, s: f64) {
        self.matrix += other.matrix * s;
        self.offset += other.offset * s;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-image latent codes for both layers and the decoders mapping them to
/// affine color transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorCorrection {
    /// Registered image ids, sorted; a code slot is an index into this list.
    image_ids: Vec<usize>,
    pub fg_codes: Vec<f64>,
    pub sky_codes: Vec<f64>,
    /// One decoder per layer, or a single decoder shared by both.
    pub decoders: Vec<Mlp>,
}

impl ColorCorrection {
    pub fn new(
        image_ids: &[usize],
        hidden: &[usize],
        shared_decoder: bool,
        code_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, RadianceError> {
        let mut ids = image_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != image_ids.len() {
            return Err(RadianceError::InvalidConfig("duplicate image ids".into()));
        }
        let normal = Normal::new(0.0, code_std)
            .map_err(|e| RadianceError::InvalidConfig(format!("code std {code_std}: {e}")))?;
        let mut codes = || (0..ids.len() * CODE_DIM).map(|_| normal.sample(rng)).collect::<Vec<_>>();
        let fg_codes = codes();
        let sky_codes = codes();
        let mut sizes = vec![CODE_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(AFFINE_PARAMS);
        let n_dec = if shared_decoder { 1 } else { 2 };
        let decoders = (0..n_dec).map(|_| Mlp::residual_init(&sizes, rng)).collect();
        Ok(Self { image_ids: ids, fg_codes, sky_codes, decoders })
    }

    pub fn from_parts(
        image_ids: Vec<usize>,
        fg_codes: Vec<f64>,
        sky_codes: Vec<f64>,
        decoders: Vec<Mlp>,
    ) -> Result<Self, RadianceError> {
        let n = image_ids.len() * CODE_DIM;
        if fg_codes.len() != n || sky_codes.len() != n || !(1..=2).contains(&decoders.len()) {
            return Err(RadianceError::ShapeMismatch("correction tables disagree".into()));
        }
        if image_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RadianceError::InvalidConfig("image ids must be sorted and unique".into()));
        }
        Ok(Self { image_ids, fg_codes, sky_codes, decoders })
    }

    pub fn image_ids(&self) -> &[usize] {
        &self.image_ids
    }

    pub fn shared_decoder(&self) -> bool {
        self.decoders.len() == 1
    }

    pub fn slot(&self, image_id: usize) -> Result<usize, RadianceError> {
        self.image_ids.binary_search(&image_id).map_err(|_| RadianceError::UnknownImage(image_id))
    }

    pub fn decoder_index(&self, layer: Layer) -> usize {
        match layer {
            Layer::Sky if self.decoders.len() == 2 => 1,
            _ => 0,
        }
    }

    pub fn code(&self, slot: usize, layer: Layer) -> &[f64] {
        let table = match layer {
            Layer::Foreground => &self.fg_codes,
            Layer::Sky => &self.sky_codes,
        };
        &table[slot * CODE_DIM..(slot + 1) * CODE_DIM]
    }

    pub fn decode_slot(&self, slot: usize, layer: Layer) -> (Affine, MlpTrace) {
        let trace = self.decoders[self.decoder_index(layer)].forward(self.code(slot, layer));
        (Affine::from_residual(&trace.output), trace)
    }

    pub fn decode(&self, image_id: usize, layer: Layer) -> Result<Affine, RadianceError> {
        Ok(self.decode_slot(self.slot(image_id)?, layer).0)
    }
}

/// The affine transform of one layer for one registered image.
pub fn decode_correction(cc: &ColorCorrection, image_id: usize, layer: Layer) -> Result<Affine, RadianceError> {
    cc.decode(image_id, layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cc(shared: bool) -> ColorCorrection {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ColorCorrection::new(&[3, 7, 11], &DEFAULT_HIDDEN, shared, 0.1, &mut rng).unwrap()
    }

    #[test]
    fn fresh_decoder_is_identity() {
        let c = cc(false);
        for id in [3, 7, 11] {
            for layer in [Layer::Foreground, Layer::Sky] {
                assert_eq!(decode_correction(&c, id, layer).unwrap(), Affine::identity());
            }
        }
        assert!(matches!(decode_correction(&c, 4, Layer::Sky), Err(RadianceError::UnknownImage(4))));
    }

    #[test]
    fn single_output_weight_matches_matrix_arithmetic() {
        let mut c = cc(false);
        let dec = &mut c.decoders[0];
        let range = dec.output_layer_range();
        // Output row 9 (offset x) reads hidden unit 17 of the last hidden layer.
        dec.params[range.start + 9 * 256 + 17] = 0.5;
        let dec = c.decoders[0].clone();

        // Independent forward pass with dense matrices.
        let sizes = dec.sizes().to_vec();
        let mut off = 0;
        let mut x = DVector::from_column_slice(c.code(1, Layer::Foreground));
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = DMatrix::from_row_slice(n_out, n_in, &dec.params[off..off + n_in * n_out]);
            let b = DVector::from_column_slice(&dec.params[off + n_in * n_out..off + n_in * n_out + n_out]);
            off += n_in * n_out + n_out;
            x = w * x + b;
            if l + 2 < sizes.len() {
                x = x.map(|v| v.max(0.0));
            }
        }
        let tf = decode_correction(&c, 7, Layer::Foreground).unwrap();
        assert_eq!(tf.matrix, Matrix3::identity());
        assert!((tf.offset.x - x[9]).abs() < 1e-12);
        assert!(tf.offset.x != 0.0 || x[9] == 0.0);
        assert_eq!(tf.offset.y, 0.0);
        // The sky decoder is separate and still identity.
        assert_eq!(decode_correction(&c, 7, Layer::Sky).unwrap(), Affine::identity());
    }

    #[test]
    fn different_codes_decode_differently() {
        let mut c = cc(true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = c.decoders[0].output_layer_range();
        for p in &mut c.decoders[0].params[r] {
            *p = rng.random_range(-0.1..0.1);
        }
        let a = decode_correction(&c, 3, Layer::Foreground).unwrap();
        let b = decode_correction(&c, 7, Layer::Foreground).unwrap();
        assert_ne!(a, b);
        // Shared decoder: the sky transform uses the same network on a different code.
        assert_ne!(a, decode_correction(&c, 3, Layer::Sky).unwrap());
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp = Mlp::residual_init(&[4, 16, 16, 12], &mut rng);
        for p in mlp.params.iter_mut() {
            *p += rng.random_range(-0.2..0.2);
        }
        let input: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d_out: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |m: &Mlp, x: &[f64]| m.forward(x).output.iter().zip(&d_out).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = vec![0.0; mlp.params.len()];
        let d_in = mlp.backward(&mlp.forward(&input), &d_out, &mut grad);
        let h = 1e-6;
        for p in 0..mlp.params.len() {
            let mut plus = mlp.clone();
            plus.params[p] += h;
            let mut minus = mlp.clone();
            minus.params[p] -= h;
            let fd = (objective(&plus, &input) - objective(&minus, &input)) / (2.0 * h);
            assert!((fd - grad[p]).abs() <= 1e-6 * fd.abs().max(1.0), "param {p}: {fd} vs {}", grad[p]);
        }
        for i in 0..4 {
            let mut xp = input.clone();
            xp[i] += h;
            let mut xm = input.clone();
            xm[i] -= h;
            let fd = (objective(&mlp, &xp) - objective(&mlp, &xm)) / (2.0 * h);
            assert!((fd - d_in[i]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
