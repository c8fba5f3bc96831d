//! Versioned little-endian binary checkpoint.
//!
//! Layout: magic `RFCK`, u32 version, fg grid (3×u32 resolution, 6×f64
//! bounds, values), sky map (2×u32 size, values), optional correction
//! (image ids, both code tables, decoders), the training poses used to pick
//! codes for novel views, and render settings. Vectors are a u64 length
//! followed by their elements.

use nalgebra::Vector3;
use std::path::Path;

use super::correction::{ColorCorrection, Mlp};
use super::field::{Aabb, LayeredRadianceField, SkyMap, VoxelGrid, GRID_CHANNELS, SKY_CHANNELS};
use super::objective::Model;
use super::RadianceError;
use crate::geometry::Pose;

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

/// A trained model plus what rendering needs to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Camera-to-world pose of every image with correction codes.
    pub code_poses: Vec<(usize, Pose)>,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn bad(reason: impl Into<String>) -> RadianceError {
    RadianceError::BadCheckpoint(reason.into())
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], RadianceError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, RadianceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, RadianceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, RadianceError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize, RadianceError> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 4 + 1 {
            return Err(bad(format!("implausible length {n}")));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>, RadianceError> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let fg = &self.model.field.fg;
        for r in fg.res {
            w.u32(r as u32);
        }
        for v in fg.bounds.min.iter().chain(fg.bounds.max.iter()) {
            w.f64(*v);
        }
        w.f64s(&fg.values);
        let sky = &self.model.field.sky;
        w.u32(sky.width as u32);
        w.u32(sky.height as u32);
        w.f64s(&sky.values);
        match &self.model.correction {
            None => w.u32(0),
            Some(cc) => {
                w.u32(1);
                w.u64(cc.image_ids().len() as u64);
                for &id in cc.image_ids() {
                    w.u64(id as u64);
                }
                w.f64s(&cc.fg_codes);
                w.f64s(&cc.sky_codes);
                w.u32(cc.decoders.len() as u32);
                for d in &cc.decoders {
                    w.u32(d.sizes().len() as u32);
                    for &s in d.sizes() {
                        w.u32(s as u32);
                    }
                    w.f64s(&d.params);
                }
            }
        }
        w.u64(self.code_poses.len() as u64);
        for (id, pose) in &self.code_poses {
            w.u64(*id as u64);
            for v in pose.wxyz() {
                w.f64(v);
            }
            for v in pose.translation.iter() {
                w.f64(*v);
            }
        }
        w.u32(self.n_samples as u32);
        w.f64(self.near);
        w.f64(self.far);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RadianceError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let res = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let mut b = [0.0; 6];
        for v in b.iter_mut() {
            *v = r.f64()?;
        }
        let bounds = Aabb::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5])).map_err(|e| bad(e.to_string()))?;
        let mut fg = VoxelGrid::new(res, bounds, 0.0, 0.0).map_err(|e| bad(e.to_string()))?;
        let values = r.f64s()?;
        if values.len() != fg.node_count() * GRID_CHANNELS {
            return Err(bad("grid value count"));
        }
        fg.values = values;
        let (w, h) = (r.u32()? as usize, r.u32()? as usize);
        let mut sky = SkyMap::new(w, h, 0.0).map_err(|e| bad(e.to_string()))?;
        let values = r.f64s()?;
        if values.len() != w * h * SKY_CHANNELS {
            return Err(bad("sky value count"));
        }
        sky.values = values;
        let correction = match r.u32()? {
            0 => None,
            1 => {
                let n = r.len()?;
                let ids = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
                let fg_codes = r.f64s()?;
                let sky_codes = r.f64s()?;
                let n_dec = r.u32()? as usize;
                let mut decoders = Vec::with_capacity(n_dec.min(2));
                for _ in 0..n_dec.min(3) {
                    let n_sizes = r.u32()? as usize;
                    if !(2..=16).contains(&n_sizes) {
                        return Err(bad("decoder depth"));
                    }
                    let sizes = (0..n_sizes).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
                    let mut mlp = Mlp::zeros(&sizes);
                    let params = r.f64s()?;
                    if params.len() != mlp.params.len() {
                        return Err(bad("decoder parameter count"));
                    }
                    mlp.params = params;
                    decoders.push(mlp);
                }
                Some(ColorCorrection::from_parts(ids, fg_codes, sky_codes, decoders).map_err(|e| bad(e.to_string()))?)
            }
            other => return Err(bad(format!("correction flag {other}"))),
        };
        let n_poses = r.len()?;
        let mut code_poses = Vec::with_capacity(n_poses);
        for _ in 0..n_poses {
            let id = r.u64()? as usize;
            let q = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
            let t = [r.f64()?, r.f64()?, r.f64()?];
            code_poses.push((id, Pose::from_wxyz(q, t)));
        }
        let n_samples = r.u32()? as usize;
        let near = r.f64()?;
        let far = r.f64()?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { model: Model { field: LayeredRadianceField { fg, sky }, correction }, code_poses, n_samples, near, far })
    }

    pub fn save(&self, path: &Path) -> Result<(), RadianceError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RadianceError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
