//! Image, depth and bitmap rasters with their file formats.
//!
//! Depth files carry a 16-byte header (`b"DPTH"`, width, height, reserved,
//! all little-endian `u32`) followed by row-major little-endian `f32`
//! values; invalid entries are NaN. Masks use binary PBM (`P4`) where a set
//! bit means "valid".

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed {kind} file: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// RGB image with linear values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self { width, height, data: vec![rgb; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        self.data[y * self.width + x] = rgb;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamped(&self) -> Image {
        let data = self.data.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect();
        Image { width: self.width, height: self.height, data }
    }

    pub fn flipped_horizontally(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Quantizes to 8 bits per channel after clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    /// Round trip through 8-bit storage, matching what [`Self::load_png`] returns.
    pub fn quantized(&self) -> Image {
        let bytes = self.to_rgb8();
        let data = bytes.chunks_exact(3).map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]).collect();
        Image { width: self.width, height: self.height, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image, RasterError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)).collect();
        Ok(Image { width: w as usize, height: h as usize, data })
    }
}

/// Z-depth raster in scene units; `NaN` marks invalid entries.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// Bitwise, so two maps with the same invalid entries compare equal.
impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.values.iter().map(|v| v.to_bits()).eq(other.values.iter().map(|v| v.to_bits()))
    }
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![f32::NAN; width * height] }
    }

    pub fn filled(width: usize, height: usize, depth: f32) -> Self {
        Self { width, height, values: vec![depth; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let values = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, values }
    }

    /// Depth at `(x, y)` if valid.
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let d = self.values[y * self.width + x];
        (d.is_finite() && d > 0.0).then_some(d)
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f32) {
        self.values[y * self.width + x] = depth;
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y).is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            // Canonical NaN keeps files byte-stable.
            let v = if v.is_finite() && *v > 0.0 { *v } else { f32::NAN };
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let bad = |reason: &str| RasterError::Malformed { kind: "depth", reason: reason.to_string() };
        if bytes.len() < 16 || &bytes[..4] != DEPTH_MAGIC {
            return Err(bad("missing DPTH header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (width, height) = (word(4), word(8));
        let n = width * height;
        if bytes.len() != 16 + 4 * n {
            return Err(bad(&format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 16)));
        }
        let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { width, height, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, bits: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = self.width.div_ceil(8);
        for y in 0..self.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..self.width {
                if self.get(x, y) {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_pbm(bytes: &[u8]) -> Result<Self, RasterError> {
        let bad = |reason: &str| RasterError::Malformed { kind: "pbm", reason: reason.to_string() };
        let mut cursor = io::Cursor::new(bytes);
        let mut tokens = Vec::new();
        // Header: magic, width, height, each whitespace separated, comments allowed.
        while tokens.len() < 3 {
            let mut tok = Vec::new();
            loop {
                let mut b = [0u8; 1];
                if cursor.read(&mut b)? == 0 {
                    return Err(bad("truncated header"));
                }
                if b[0] == b'#' {
                    while cursor.read(&mut b)? == 1 && b[0] != b'\n' {}
                    if !tok.is_empty() {
                        break;
                    }
                    continue;
                }
                if b[0].is_ascii_whitespace() {
                    if tok.is_empty() {
                        continue;
                    }
                    break;
                }
                tok.push(b[0]);
            }
            tokens.push(String::from_utf8_lossy(&tok).into_owned());
        }
        if tokens[0] != "P4" {
            return Err(bad("expected P4 magic"));
        }
        let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
        let start = cursor.position() as usize;
        let row_bytes = width.div_ceil(8);
        let payload = &bytes[start..];
        if payload.len() != row_bytes * height {
            return Err(bad("payload size mismatch"));
        }
        let mut bm = Bitmap::new(width, height, false);
        for y in 0..height {
            for x in 0..width {
                let byte = payload[y * row_bytes + x / 8];
                bm.set(x, y, byte & (0x80 >> (x % 8)) != 0);
            }
        }
        Ok(bm)
    }

    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        fs::write(path, self.to_pbm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        Self::from_pbm(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn depth_header_layout() {
        let mut d = DepthMap::filled(3, 2, 1.5);
        d.set(1, 1, f32::NAN);
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"DPTH");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), 16 + 24);
        let back = DepthMap::from_bytes(&bytes).unwrap();
        assert_eq!(back.get(0, 0), Some(1.5));
        assert_eq!(back.get(1, 1), None);
    }

    #[test]
    fn depth_rejects_truncated() {
        let bytes = DepthMap::filled(4, 4, 1.0).to_bytes();
        assert!(DepthMap::from_bytes(&bytes[..20]).is_err());
        assert!(DepthMap::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn pbm_with_comment_parses() {
        let mut data = b"P4\n# kept pixels\n10 2\n".to_vec();
        data.extend_from_slice(&[0b1000_0000, 0b0100_0000, 0, 0]);
        let bm = Bitmap::from_pbm(&data).unwrap();
        assert!(bm.get(0, 0));
        assert!(bm.get(9, 0));
        assert_eq!(bm.count(), 2);
    }

    proptest! {
        #[test]
        fn pbm_round_trip(w in 1usize..20, h in 1usize..10, seed in any::<u64>()) {
            let mut bm = Bitmap::new(w, h, false);
            let mut s = seed;
            for b in bm.bits.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *b = (s >> 33) & 1 == 1;
            }
            prop_assert_eq!(Bitmap::from_pbm(&bm.to_pbm()).unwrap(), bm);
        }
    }
}
