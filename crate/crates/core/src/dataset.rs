//! On-disk multi-camera dataset.
//!
//! ```text
//! scene.json            generator spec (optional)
//! rig_true.json         ground-truth rig and trajectory
//! rig_init.json         perturbed rig used to initialize refinement
//! isp.json              ground-truth color distortions (optional)
//! graph.jsonl           correspondence graph (optional)
//! images/TTTT_K.png     observed images
//! clean/TTTT_K.png      undistorted renders (optional)
//! depth/TTTT_K.dpth     depth maps, NaN where invalid
//! sky/TTTT_K.pbm        sky masks, set bit = sky
//! ```

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Pose, RigFile, RigState};
use crate::pose_refine::{CorrespondenceGraph, PoseRefineError};
use crate::geometry::PoseRecord;
use crate::radiance::Affine;
use crate::raster::{Bitmap, DepthMap, Image, RasterError};
use crate::warp::VirtualView;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Raster { path: PathBuf, source: RasterError },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    PoseRefine(#[from] PoseRefineError),
    #[error("dataset is inconsistent: {0}")]
    Inconsistent(String),
}

/// Global image index of (timestamp, camera).
pub fn image_id(timestamp: usize, camera: usize, n_cameras: usize) -> usize {
    timestamp * n_cameras + camera
}

pub fn frame_stem(timestamp: usize, camera: usize) -> String {
    format!("{timestamp:04}_{camera}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: usize,
    pub camera: usize,
    pub image: Image,
    pub clean: Option<Image>,
    pub depth: Option<DepthMap>,
    pub sky: Option<Bitmap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRecord {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl From<&Affine> for AffineRecord {
    fn from(a: &Affine) -> Self {
        let mut matrix = [[0.0; 3]; 3];
        for (r, row) in matrix.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a.matrix[(r, c)];
            }
        }
        Self { matrix, offset: a.offset.into() }
    }
}

impl From<&AffineRecord> for Affine {
    fn from(r: &AffineRecord) -> Self {
        Affine {
            matrix: Matrix3::from_fn(|i, j| r.matrix[i][j]),
            offset: Vector3::from(r.offset),
        }
    }
}

/// Ground-truth color distortion of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IspRecord {
    pub timestamp: usize,
    pub camera: usize,
    pub fg: AffineRecord,
    pub sky: AffineRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rig_true: RigFile,
    pub rig_init: Option<RigFile>,
    /// Ordered by timestamp, then camera.
    pub frames: Vec<Frame>,
    pub isp: Option<Vec<IspRecord>>,
    pub graph: Option<CorrespondenceGraph>,
    pub spec_json: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn raster_err(path: &Path) -> impl FnOnce(RasterError) -> DatasetError + '_ {
    move |source| DatasetError::Raster { path: path.to_path_buf(), source }
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_rig(path: &Path) -> Result<RigFile, DatasetError> {
    RigFile::from_json(&read_text(path)?).map_err(|e| DatasetError::Parse { path: path.into(), reason: e.to_string() })
}

pub fn save_rig(path: &Path, rig: &RigFile) -> Result<(), DatasetError> {
    write_text(path, &rig.to_json())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VirtualRecord {
    camera: usize,
    code_ref: usize,
    pose: PoseRecord,
}

/// Writes virtual views as `index.json` plus `NNNNN.png` images,
/// `NNNNN.pbm` validity masks and `NNNNN.dpth` warped depths.
pub fn save_virtual_views(dir: &Path, views: &[VirtualView]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let index: Vec<VirtualRecord> = views
        .iter()
        .map(|v| VirtualRecord { camera: v.camera, code_ref: v.code_ref, pose: PoseRecord::from(&v.pose) })
        .collect();
    write_text(&dir.join("index.json"), &serde_json::to_string_pretty(&index).expect("index serializes"))?;
    for (n, v) in views.iter().enumerate() {
        let p = dir.join(format!("{n:05}.png"));
        v.image.save_png(&p).map_err(raster_err(&p))?;
        let p = dir.join(format!("{n:05}.pbm"));
        v.valid.save(&p).map_err(raster_err(&p))?;
        let p = dir.join(format!("{n:05}.dpth"));
        v.depth.save(&p).map_err(raster_err(&p))?;
    }
    Ok(())
}

pub fn load_virtual_views(dir: &Path) -> Result<Vec<VirtualView>, DatasetError> {
    let path = dir.join("index.json");
    let index: Vec<VirtualRecord> = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| DatasetError::Parse { path: path.clone(), reason: e.to_string() })?;
    index
        .into_iter()
        .enumerate()
        .map(|(n, r)| {
            let p = dir.join(format!("{n:05}.png"));
            let image = Image::load_png(&p).map_err(raster_err(&p))?;
            let p = dir.join(format!("{n:05}.pbm"));
            let valid = Bitmap::load(&p).map_err(raster_err(&p))?;
            let p = dir.join(format!("{n:05}.dpth"));
            let depth = DepthMap::load(&p).map_err(raster_err(&p))?;
            Ok(VirtualView { pose: Pose::from(&r.pose), camera: r.camera, image, valid, depth, code_ref: r.code_ref })
        })
        .collect()
}

impl Dataset {
    pub fn n_cameras(&self) -> usize {
        self.rig_true.cameras.len()
    }

    pub fn n_timestamps(&self) -> usize {
        self.rig_true.ego_poses.len()
    }

    pub fn intrinsics(&self) -> Vec<Intrinsics> {
        self.rig_true.intrinsics()
    }

    pub fn image_id(&self, timestamp: usize, camera: usize) -> usize {
        image_id(timestamp, camera, self.n_cameras())
    }

    pub fn frame(&self, timestamp: usize, camera: usize) -> &Frame {
        &self.frames[self.image_id(timestamp, camera)]
    }

    /// Camera-to-world pose of every frame under `rig`, in frame order.
    pub fn frame_poses(&self, rig: &RigState) -> Result<Vec<Pose>, DatasetError> {
        self.frames.iter().map(|f| Ok(rig.camera_pose(f.timestamp, f.camera)?)).collect()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let (n_t, n_c) = (self.n_timestamps(), self.n_cameras());
        if self.frames.len() != n_t * n_c {
            return Err(DatasetError::Inconsistent(format!("{} frames for {n_t}×{n_c} views", self.frames.len())));
        }
        let ks = self.intrinsics();
        for (n, f) in self.frames.iter().enumerate() {
            if image_id(f.timestamp, f.camera, n_c) != n {
                return Err(DatasetError::Inconsistent(format!("frame {n} out of order")));
            }
            let k = &ks[f.camera];
            let (w, h) = (k.width as usize, k.height as usize);
            let ok = f.image.width == w
                && f.image.height == h
                && f.depth.as_ref().is_none_or(|d| d.width == w && d.height == h)
                && f.sky.as_ref().is_none_or(|s| s.width == w && s.height == h);
            if !ok {
                return Err(DatasetError::Inconsistent(format!("frame {n} raster size differs from intrinsics")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        for sub in ["images", "clean", "depth", "sky"] {
            fs::create_dir_all(dir.join(sub)).map_err(io_err(dir))?;
        }
        if let Some(spec) = &self.spec_json {
            write_text(&dir.join("scene.json"), spec)?;
        }
        save_rig(&dir.join("rig_true.json"), &self.rig_true)?;
        if let Some(init) = &self.rig_init {
            save_rig(&dir.join("rig_init.json"), init)?;
        }
        if let Some(isp) = &self.isp {
            write_text(&dir.join("isp.json"), &serde_json::to_string_pretty(isp).expect("isp serializes"))?;
        }
        if let Some(g) = &self.graph {
            write_text(&dir.join("graph.jsonl"), &g.to_jsonl())?;
        }
        for f in &self.frames {
            let stem = frame_stem(f.timestamp, f.camera);
            let p = dir.join("images").join(format!("{stem}.png"));
            f.image.save_png(&p).map_err(raster_err(&p))?;
            if let Some(c) = &f.clean {
                let p = dir.join("clean").join(format!("{stem}.png"));
                c.save_png(&p).map_err(raster_err(&p))?;
            }
            if let Some(d) = &f.depth {
                let p = dir.join("depth").join(format!("{stem}.dpth"));
                d.save(&p).map_err(raster_err(&p))?;
            }
            if let Some(s) = &f.sky {
                let p = dir.join("sky").join(format!("{stem}.pbm"));
                s.save(&p).map_err(raster_err(&p))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let rig_true = load_rig(&dir.join("rig_true.json"))?;
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let rig_init = optional("rig_init.json").map(|p| load_rig(&p)).transpose()?;
        let isp = optional("isp.json")
            .map(|p| {
                serde_json::from_str::<Vec<IspRecord>>(&read_text(&p)?)
                    .map_err(|e| DatasetError::Parse { path: p.clone(), reason: e.to_string() })
            })
            .transpose()?;
        let (n_t, n_c) = (rig_true.ego_poses.len(), rig_true.cameras.len());
        let graph = optional("graph.jsonl")
            .map(|p| CorrespondenceGraph::from_jsonl(&read_text(&p)?, n_t, n_c).map_err(DatasetError::from))
            .transpose()?;
        let spec_json = optional("scene.json").map(|p| read_text(&p)).transpose()?;
        let mut frames = Vec::with_capacity(n_t * n_c);
        for t in 0..n_t {
            for k in 0..n_c {
                let stem = frame_stem(t, k);
                let p = dir.join("images").join(format!("{stem}.png"));
                let image = Image::load_png(&p).map_err(raster_err(&p))?;
                let clean = optional(&format!("clean/{stem}.png"))
                    .map(|p| Image::load_png(&p).map_err(raster_err(&p)))
                    .transpose()?;
                let depth = optional(&format!("depth/{stem}.dpth"))
                    .map(|p| DepthMap::load(&p).map_err(raster_err(&p)))
                    .transpose()?;
                let sky = optional(&format!("sky/{stem}.pbm"))
                    .map(|p| Bitmap::load(&p).map_err(raster_err(&p)))
                    .transpose()?;
                frames.push(Frame { timestamp: t, camera: k, image, clean, depth, sky });
            }
        }
        let ds = Self { rig_true, rig_init, frames, isp, graph, spec_json };
        ds.validate()?;
        Ok(ds)
    }
}
