//! Frame and cloud IO plus pinhole back-projection.
//!
//! Depth frames are 16-bit binary PGM (maxval 65535, big-endian samples),
//! masks are 8-bit binary PGM (maxval 255) whose pixel values are
//! [`PointLabel`] codes. Labeled clouds travel as PLY. All parse errors
//! carry byte offsets or field paths so a bad capture names its own problem.

mod manifest;
mod pgm;
mod ply;

pub use manifest::{manifest_load, manifest_save, FrameRecord, Manifest};
pub use pgm::{
    decode_depth_pgm, decode_mask_pgm, encode_depth_pgm, encode_mask_pgm, load_depth_pgm,
    load_mask_pgm, save_depth_pgm, save_mask_pgm,
};
pub use ply::{decode_ply, encode_ply, load_ply, save_ply, PlyFormat};

use crate::geometry::{CameraIntrinsics, GeometryError, LabeledPointCloud, PointLabel};
use thiserror::Error;

/// Points farther than this from the camera are discarded during
/// back-projection unless the caller overrides the range.
pub const DEFAULT_MAX_RANGE_M: f64 = 3.0;
/// Default per-class mask erosion, in pixels, applied before back-projection
/// to keep mixed boundary pixels from spraying points off silhouette edges.
pub const DEFAULT_ERODE_PX: u32 = 2;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("pgm parse error at byte {offset}: {detail}")]
    PgmParse { offset: usize, detail: String },
    #[error("mask code {code} at byte {offset} is not a point label (expected 0..=3)")]
    BadMaskCode { offset: usize, code: u8 },
    #[error("ply parse error: {detail}")]
    PlyParse { detail: String },
    #[error("ply vertex {index}: {detail}")]
    PlyVertex { index: usize, detail: String },
    #[error("manifest parse error: {detail}")]
    ManifestParse { detail: String },
    #[error("manifest field {field}: {detail}")]
    ManifestField { field: String, detail: String },
    #[error("dimension mismatch: {detail}")]
    DimensionMismatch { detail: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &std::path::Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// 16-bit depth frame; sample value 0 means "no measurement".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Result<Self, IngestError> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(IngestError::DimensionMismatch {
                detail: format!(
                    "depth data holds {} samples, {}x{} needs {}",
                    data.len(),
                    width,
                    height,
                    (width as usize) * (height as usize)
                ),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[(v as usize) * (self.width as usize) + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: u16) {
        self.data[(v as usize) * (self.width as usize) + u as usize] = value;
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }
}

/// Per-pixel label frame; values are [`PointLabel`] codes, validated on load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: u32,
    pub height: u32,
    data: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, IngestError> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(IngestError::DimensionMismatch {
                detail: format!(
                    "mask data holds {} samples, {}x{} needs {}",
                    data.len(),
                    width,
                    height,
                    (width as usize) * (height as usize)
                ),
            });
        }
        for (i, &code) in data.iter().enumerate() {
            if code > 3 {
                return Err(IngestError::BadMaskCode { offset: i, code });
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn background(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.data[(v as usize) * (self.width as usize) + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, code: u8) {
        debug_assert!(code <= 3);
        self.data[(v as usize) * (self.width as usize) + u as usize] = code;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn labels(&self) -> impl Iterator<Item = PointLabel> + '_ {
        self.data
            .iter()
            .map(|&c| PointLabel::from_code(c).expect("mask codes validated on construction"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackprojectOptions {
    pub erode_px: u32,
    pub max_range_m: f64,
}

impl Default for BackprojectOptions {
    fn default() -> Self {
        Self {
            erode_px: DEFAULT_ERODE_PX,
            max_range_m: DEFAULT_MAX_RANGE_M,
        }
    }
}

/// Per-class morphological erosion, 4-connected, `erode_px` passes.
///
/// A pixel keeps its label only while it and its four neighbors share that
/// label; image borders erode (outside counts as background). Background
/// pixels are never grown or shrunk.
pub fn erode_mask(mask: &MaskImage, erode_px: u32) -> MaskImage {
    let w = mask.width as usize;
    let h = mask.height as usize;
    let mut cur = mask.data.clone();
    let mut next = vec![0u8; cur.len()];
    for _ in 0..erode_px {
        for v in 0..h {
            for u in 0..w {
                let c = cur[v * w + u];
                if c == 0 {
                    next[v * w + u] = 0;
                    continue;
                }
                let keep = u > 0
                    && u + 1 < w
                    && v > 0
                    && v + 1 < h
                    && cur[v * w + u - 1] == c
                    && cur[v * w + u + 1] == c
                    && cur[(v - 1) * w + u] == c
                    && cur[(v + 1) * w + u] == c;
                next[v * w + u] = if keep { c } else { 0 };
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    MaskImage {
        width: mask.width,
        height: mask.height,
        data: cur,
    }
}

/// Back-projects one depth/mask frame to a camera-frame labeled cloud with
/// the default 3 m range cutoff. See [`backproject_frame_with`].
pub fn backproject_frame(
    depth: &DepthImage,
    mask: &MaskImage,
    intrinsics: &CameraIntrinsics,
    erode_px: u32,
) -> Result<LabeledPointCloud, IngestError> {
    backproject_frame_with(
        depth,
        mask,
        intrinsics,
        &BackprojectOptions {
            erode_px,
            ..Default::default()
        },
    )
}

/// Back-projects one depth/mask frame to a camera-frame labeled cloud.
///
/// A pixel emits a point exactly when it has a depth sample (> 0), its
/// eroded label is not background, and its metric depth is within
/// `max_range_m` (inclusive). The point is
/// `((u - cx) z / fx, (v - cy) z / fy, z)` with `z = sample * depth_scale`,
/// so projecting it back lands on the source pixel with its depth intact.
/// Scan order is row-major, so output order is deterministic.
pub fn backproject_frame_with(
    depth: &DepthImage,
    mask: &MaskImage,
    intrinsics: &CameraIntrinsics,
    opts: &BackprojectOptions,
) -> Result<LabeledPointCloud, IngestError> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(IngestError::DimensionMismatch {
            detail: format!(
                "depth is {}x{} but mask is {}x{}",
                depth.width, depth.height, mask.width, mask.height
            ),
        });
    }
    if depth.width != intrinsics.width || depth.height != intrinsics.height {
        return Err(IngestError::DimensionMismatch {
            detail: format!(
                "frame is {}x{} but intrinsics declare {}x{}",
                depth.width, depth.height, intrinsics.width, intrinsics.height
            ),
        });
    }
    intrinsics.validate()?;
    let eroded = if opts.erode_px == 0 {
        mask.clone()
    } else {
        erode_mask(mask, opts.erode_px)
    };
    let mut cloud = LabeledPointCloud::empty();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let code = eroded.get(u, v);
            if code == 0 {
                continue;
            }
            let sample = depth.get(u, v);
            if sample == 0 {
                continue;
            }
            let z = sample as f64 * intrinsics.depth_scale;
            if z > opts.max_range_m {
                continue;
            }
            let label = PointLabel::from_code(code)?;
            cloud
                .push(intrinsics.backproject(u as f64, v as f64, z), label)
                .expect("finite by construction");
        }
    }
    Ok(cloud)
}
