//! Volumetric fusion of labeled depth frames.
//!
//! A dense truncated-signed-distance volume accumulates per-frame projective
//! updates: every voxel center is projected into the frame, compared against
//! the measured depth there, and blended by a weighted running average.
//! Labeled pixels also vote for the voxel's semantic class; background
//! pixels carve free space in front of their depth sample without writing
//! any surface. The fused surface comes back out as one labeled point per
//! tsdf zero crossing between adjacently observed voxels.
//!
//! Integration parallelizes over z-slabs of the volume; each voxel is owned
//! by exactly one slab and sees frames in sequence order, so fused fields
//! are bit-identical at any thread count. Extraction scans x-adjacent pairs,
//! then y-adjacent, then z-adjacent, each pass in row-major voxel order, so
//! the output point order is deterministic too.

use crate::geometry::{
    CameraIntrinsics, GeometryError, LabeledPointCloud, PointLabel, RigidTransform, Vec3,
};
use crate::ingest::{
    backproject_frame_with, erode_mask, load_depth_pgm, load_mask_pgm, BackprojectOptions,
    DepthImage, IngestError, Manifest, MaskImage, DEFAULT_ERODE_PX, DEFAULT_MAX_RANGE_M,
};
use crate::registration::{register, RegistrationConfig, RegistrationError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Hard ceiling on voxel count; a volume at this size holds ~4 GB of state.
pub const MAX_VOXELS: usize = 220_000_000;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("bad fusion config: {detail}")]
    BadConfig { detail: String },
    #[error("dimension mismatch: {detail}")]
    Dimension { detail: String },
    #[error("frame {frame} has no pose but tracking mode is manifest_poses")]
    MissingPose { frame: usize },
    #[error("no frame sequence to fuse")]
    EmptySequence,
    #[error("no labeled pixels in any frame; cannot fit volume bounds")]
    EmptyScene,
    #[error(
        "volume of {dims:?} voxels ({voxels} total) exceeds the {max} voxel ceiling; \
         coarsen voxel_size or shrink the bounds"
    )]
    VolumeTooLarge {
        dims: [usize; 3],
        voxels: u128,
        max: usize,
    },
    #[error("pose tracking failed at frame {frame}: {source}")]
    Tracking {
        frame: usize,
        source: Box<RegistrationError>,
    },
    #[error("pose tracking did not converge at frame {frame}")]
    TrackingDidNotConverge { frame: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad volume sidecar: {detail}")]
    Sidecar { path: PathBuf, detail: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn io_err(path: &Path, source: std::io::Error) -> FusionError {
    FusionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where the volume sits in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundsPolicy {
    /// Fit an axis-aligned box around all posed frame clouds, padded on
    /// every side. Needs the poses up front, so it cannot be combined with
    /// frame-to-model tracking.
    Auto { padding_m: f64 },
    /// A fixed axis-aligned box in world coordinates.
    Fixed { min: [f64; 3], max: [f64; 3] },
}

impl BoundsPolicy {
    /// Fixed box sized for a single trellis-trained tree: 1.5 m x 1.5 m
    /// footprint centered on the origin, 2.5 m tall from the ground plane.
    pub fn tree_box() -> Self {
        BoundsPolicy::Fixed {
            min: [-0.75, -0.75, 0.0],
            max: [0.75, 0.75, 2.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingMode {
    /// Take the camera-to-world pose of every frame from its record.
    ManifestPoses,
    /// First frame defines the world frame at identity; each later frame is
    /// registered against the surface extracted from the volume so far.
    FrameToModel,
}

impl std::str::FromStr for TrackingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "manifest_poses" | "manifest-poses" => Ok(TrackingMode::ManifestPoses),
            "frame_to_model" | "frame-to-model" => Ok(TrackingMode::FrameToModel),
            other => Err(format!(
                "unknown tracking mode {other:?}, expected manifest_poses or frame_to_model"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub voxel_size: f64,
    /// Truncation band in meters; `None` means 4 x voxel_size.
    pub truncation: Option<f64>,
    /// Observation count at which a voxel stops gaining inertia.
    pub max_weight: f64,
    /// Depth samples beyond this range are ignored (m).
    pub max_range_m: f64,
    /// Mask erosion applied once per frame before integration and before
    /// backprojection, killing label bleed at silhouette boundaries.
    pub erode_px: u32,
    pub bounds: BoundsPolicy,
    pub tracking: TrackingMode,
    /// Registration settings for frame-to-model tracking.
    pub tracking_registration: RegistrationConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.004,
            truncation: None,
            max_weight: 100.0,
            max_range_m: DEFAULT_MAX_RANGE_M,
            erode_px: DEFAULT_ERODE_PX,
            bounds: BoundsPolicy::Auto { padding_m: 0.05 },
            tracking: TrackingMode::ManifestPoses,
            tracking_registration: RegistrationConfig {
                method: crate::registration::Method::FastGicp,
                ..RegistrationConfig::default()
            },
        }
    }
}

impl FusionConfig {
    pub fn truncation_m(&self) -> f64 {
        self.truncation.unwrap_or(4.0 * self.voxel_size)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |detail: String| Err(FusionError::BadConfig { detail });
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        let trunc = self.truncation_m();
        if !(trunc.is_finite() && trunc >= self.voxel_size) {
            return bad(format!(
                "truncation {} must be at least voxel_size {}",
                trunc, self.voxel_size
            ));
        }
        if !(self.max_weight >= 1.0 && self.max_weight.is_finite()) {
            return bad(format!("max_weight must be at least 1, got {}", self.max_weight));
        }
        if !(self.max_range_m > 0.0 && self.max_range_m.is_finite()) {
            return bad(format!("max_range_m must be positive, got {}", self.max_range_m));
        }
        match self.bounds {
            BoundsPolicy::Auto { padding_m } => {
                if !(padding_m >= 0.0 && padding_m.is_finite()) {
                    return bad(format!("bounds padding must be non-negative, got {padding_m}"));
                }
                if self.tracking == TrackingMode::FrameToModel {
                    return bad(
                        "frame_to_model tracking needs fixed bounds: poses are not known \
                         up front, so the volume cannot be auto-fitted"
                            .into(),
                    );
                }
            }
            BoundsPolicy::Fixed { min, max } => {
                for a in 0..3 {
                    if !(min[a].is_finite() && max[a].is_finite() && min[a] < max[a]) {
                        return bad(format!(
                            "fixed bounds must satisfy min < max per axis, got {min:?}..{max:?}"
                        ));
                    }
                }
            }
        }
        self.tracking_registration
            .validate()
            .map_err(|e| FusionError::BadConfig {
                detail: format!("tracking_registration: {e}"),
            })
    }
}

/// Dense truncated-signed-distance volume with per-voxel label votes.
///
/// `origin` is the minimum corner; voxel `(x, y, z)` is centered at
/// `origin + (x + 0.5, y + 0.5, z + 0.5) * voxel_size` and lives at linear
/// index `x + nx * (y + ny * z)`. A voxel with weight 0 has never been
/// observed and its tsdf value is meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    origin: Vec3,
    voxel_size: f64,
    truncation: f64,
    max_weight: f32,
    dims: [usize; 3],
    tsdf: Vec<f64>,
    weight: Vec<f32>,
    votes: Vec<[u16; 3]>,
}

impl TsdfVolume {
    pub fn new(
        origin: Vec3,
        dims: [usize; 3],
        voxel_size: f64,
        truncation: f64,
        max_weight: f64,
    ) -> Result<Self, FusionError> {
        let bad = |detail: String| Err(FusionError::BadConfig { detail });
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return bad(format!("voxel_size must be positive, got {voxel_size}"));
        }
        if !(truncation.is_finite() && truncation >= voxel_size) {
            return bad(format!(
                "truncation {truncation} must be at least voxel_size {voxel_size}"
            ));
        }
        if !(max_weight >= 1.0 && max_weight.is_finite()) {
            return bad(format!("max_weight must be at least 1, got {max_weight}"));
        }
        if dims.iter().any(|&d| d == 0) {
            return bad(format!("dims must be positive, got {dims:?}"));
        }
        if !(origin.x.is_finite() && origin.y.is_finite() && origin.z.is_finite()) {
            return bad("origin must be finite".into());
        }
        let voxels = dims[0] as u128 * dims[1] as u128 * dims[2] as u128;
        if voxels > MAX_VOXELS as u128 {
            return Err(FusionError::VolumeTooLarge {
                dims,
                voxels,
                max: MAX_VOXELS,
            });
        }
        let n = voxels as usize;
        Ok(Self {
            origin,
            voxel_size,
            truncation,
            max_weight: max_weight as f32,
            dims,
            tsdf: vec![0.0; n],
            weight: vec![0.0; n],
            votes: vec![[0; 3]; n],
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn max_weight(&self) -> f64 {
        self.max_weight as f64
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.tsdf.len()
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    pub fn tsdf_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.tsdf[self.index(x, y, z)]
    }

    pub fn weight_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.weight[self.index(x, y, z)] as f64
    }

    pub fn votes_at(&self, x: usize, y: usize, z: usize) -> [u16; 3] {
        self.votes[self.index(x, y, z)]
    }

    pub fn observed_voxels(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    /// Blend one depth/mask frame into the volume at `pose` (camera to
    /// world).
    ///
    /// Per voxel, with measured depth `d` at the voxel's pixel and voxel
    /// camera-depth `z`, the signed distance is `sdf = d - z`. A labeled
    /// pixel updates voxels with `sdf > -truncation` using
    /// `clamp(sdf / truncation, -1, 1)` and adds one vote for its class. A
    /// background pixel only carves: voxels with `sdf >= +truncation` get a
    /// free-space observation of +1 and no vote. Depth samples of 0 or
    /// beyond `max_range_m` are ignored.
    pub fn integrate_frame(
        &mut self,
        depth: &DepthImage,
        mask: &MaskImage,
        intrinsics: &CameraIntrinsics,
        pose: &RigidTransform,
        max_range_m: f64,
    ) -> Result<(), FusionError> {
        intrinsics.validate()?;
        if depth.width != intrinsics.width || depth.height != intrinsics.height {
            return Err(FusionError::Dimension {
                detail: format!(
                    "depth is {}x{}, intrinsics expect {}x{}",
                    depth.width, depth.height, intrinsics.width, intrinsics.height
                ),
            });
        }
        if mask.width != depth.width || mask.height != depth.height {
            return Err(FusionError::Dimension {
                detail: format!(
                    "mask is {}x{}, depth is {}x{}",
                    mask.width, mask.height, depth.width, depth.height
                ),
            });
        }
        if !(max_range_m > 0.0 && max_range_m.is_finite()) {
            return Err(FusionError::BadConfig {
                detail: format!("max_range_m must be positive, got {max_range_m}"),
            });
        }
        let world_to_cam = pose.inverse();
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let slab = nx * ny;
        let origin = self.origin;
        let voxel = self.voxel_size;
        let truncation = self.truncation;
        let max_weight = self.max_weight;
        let depth_scale = intrinsics.depth_scale;
        let (w_px, h_px) = (intrinsics.width as i64, intrinsics.height as i64);

        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .zip(self.votes.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(z, ((tsdf, weight), votes))| {
                let cz = origin.z + (z as f64 + 0.5) * voxel;
                for y in 0..ny {
                    let cy = origin.y + (y as f64 + 0.5) * voxel;
                    for x in 0..nx {
                        let cx = origin.x + (x as f64 + 0.5) * voxel;
                        let p_cam = world_to_cam.apply(&Vec3::new(cx, cy, cz));
                        let Some((u, v)) = intrinsics.project(&p_cam) else {
                            continue;
                        };
                        let (ui, vi) = (u.round() as i64, v.round() as i64);
                        if ui < 0 || ui >= w_px || vi < 0 || vi >= h_px {
                            continue;
                        }
                        let sample = depth.get(ui as u32, vi as u32);
                        if sample == 0 {
                            continue;
                        }
                        let d = sample as f64 * depth_scale;
                        if d > max_range_m {
                            continue;
                        }
                        let sdf = d - p_cam.z;
                        let code = mask.get(ui as u32, vi as u32);
                        let obs = if code == 0 {
                            // Free-space carving: the observed surface is
                            // well behind this voxel along the ray.
                            if sdf >= truncation {
                                1.0
                            } else {
                                continue;
                            }
                        } else if sdf > -truncation {
                            (sdf / truncation).clamp(-1.0, 1.0)
                        } else {
                            continue;
                        };
                        let i = x + nx * y;
                        let w_old = weight[i] as f64;
                        tsdf[i] = (tsdf[i] * w_old + obs) / (w_old + 1.0);
                        weight[i] = (weight[i] + 1.0).min(max_weight);
                        if code != 0 {
                            let slot = &mut votes[i][code as usize - 1];
                            *slot = slot.saturating_add(1);
                        }
                    }
                }
            });
        Ok(())
    }

    /// Labeled surface points at tsdf zero crossings.
    ///
    /// For each pair of adjacently observed voxels (weight > 0 on both)
    /// whose tsdf values straddle zero, one point is emitted on the
    /// connecting segment by linear interpolation. Its label is the class
    /// with the most combined votes from the two voxels; ties fall to the
    /// lower class code, and a voteless crossing is Trunk. Pairs are
    /// scanned x-adjacent first, then y-adjacent, then z-adjacent, each
    /// pass in row-major voxel order. An unobserved volume yields an empty
    /// cloud.
    pub fn extract_surface(&self) -> LabeledPointCloud {
        let [nx, ny, nz] = self.dims;
        let slab = nx * ny;
        let passes: [(usize, usize, usize); 3] = [(1, 0, 0), (0, 1, 0), (0, 0, 1)];
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (dx, dy, dz) in passes {
            let step = dx + nx * dy + slab * dz;
            let per_slab: Vec<Vec<(Vec3, PointLabel)>> = (0..nz)
                .into_par_iter()
                .map(|z| {
                    let mut out = Vec::new();
                    if z + dz >= nz {
                        return out;
                    }
                    for y in 0..(ny - dy) {
                        for x in 0..(nx - dx) {
                            let a = self.index(x, y, z);
                            let b = a + step;
                            if self.weight[a] <= 0.0 || self.weight[b] <= 0.0 {
                                continue;
                            }
                            let (t0, t1) = (self.tsdf[a], self.tsdf[b]);
                            if (t0 < 0.0) == (t1 < 0.0) {
                                continue;
                            }
                            let frac = t0 / (t0 - t1);
                            let ca = self.voxel_center(x, y, z);
                            let cb = self.voxel_center(x + dx, y + dy, z + dz);
                            let p = ca + (cb - ca) * frac;
                            out.push((p, crossing_label(self.votes[a], self.votes[b])));
                        }
                    }
                    out
                })
                .collect();
            for slab_points in per_slab {
                for (p, l) in slab_points {
                    points.push(p);
                    labels.push(l);
                }
            }
        }
        LabeledPointCloud::new(points, labels).expect("voxel centers are finite")
    }
}

fn crossing_label(a: [u16; 3], b: [u16; 3]) -> PointLabel {
    let combined = [
        a[0] as u32 + b[0] as u32,
        a[1] as u32 + b[1] as u32,
        a[2] as u32 + b[2] as u32,
    ];
    let mut best = 0;
    for c in 1..3 {
        if combined[c] > combined[best] {
            best = c;
        }
    }
    match best {
        0 => PointLabel::Trunk,
        1 => PointLabel::Branch,
        _ => PointLabel::Clutter,
    }
}

/// One frame of input to [`fuse_sequence`], already decoded.
#[derive(Debug, Clone)]
pub struct FusionFrame {
    pub depth: DepthImage,
    pub mask: MaskImage,
    /// Camera-to-world pose; required under manifest-poses tracking.
    pub pose: Option<RigidTransform>,
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub volume: TsdfVolume,
    pub cloud: LabeledPointCloud,
    /// Camera-to-world pose actually used for each frame, in input order.
    pub trajectory: Vec<RigidTransform>,
}

/// Fuse a frame sequence into one volume and extract its surface.
///
/// Masks are eroded once per frame before anything reads them. Under
/// manifest-poses tracking every frame must carry a pose and the volume
/// bounds may be auto-fitted to the posed clouds. Under frame-to-model
/// tracking the first frame defines the world frame at identity and each
/// later frame's pose is estimated by registering its backprojected cloud
/// against the surface extracted from the volume so far, warm-started at
/// the previous pose; a tracking failure aborts with the frame index.
pub fn fuse_sequence(
    intrinsics: &CameraIntrinsics,
    frames: &[FusionFrame],
    cfg: &FusionConfig,
) -> Result<FusionOutput, FusionError> {
    cfg.validate()?;
    intrinsics.validate()?;
    if frames.is_empty() {
        return Err(FusionError::EmptySequence);
    }
    let eroded: Vec<MaskImage> = frames
        .iter()
        .map(|f| erode_mask(&f.mask, cfg.erode_px))
        .collect();
    let backproject_opts = BackprojectOptions {
        erode_px: 0, // masks are pre-eroded above
        max_range_m: cfg.max_range_m,
    };
    let clouds: Vec<LabeledPointCloud> = frames
        .iter()
        .zip(&eroded)
        .map(|(f, mask)| backproject_frame_with(&f.depth, mask, intrinsics, &backproject_opts))
        .collect::<Result<_, _>>()?;

    match cfg.tracking {
        TrackingMode::ManifestPoses => {
            let mut trajectory = Vec::with_capacity(frames.len());
            for (i, f) in frames.iter().enumerate() {
                trajectory.push(f.pose.ok_or(FusionError::MissingPose { frame: i })?);
            }
            let (origin, dims) = match cfg.bounds {
                BoundsPolicy::Fixed { min, max } => fixed_grid(min, max, cfg.voxel_size),
                BoundsPolicy::Auto { padding_m } => {
                    let mut lo = Vec3::repeat(f64::INFINITY);
                    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
                    let mut seen = false;
                    for (cloud, pose) in clouds.iter().zip(&trajectory) {
                        for p in cloud.points() {
                            let w = pose.apply(p);
                            lo = lo.inf(&w);
                            hi = hi.sup(&w);
                            seen = true;
                        }
                    }
                    if !seen {
                        return Err(FusionError::EmptyScene);
                    }
                    let pad = Vec3::repeat(padding_m);
                    fixed_grid((lo - pad).into(), (hi + pad).into(), cfg.voxel_size)
                }
            };
            let mut volume = TsdfVolume::new(
                origin,
                dims,
                cfg.voxel_size,
                cfg.truncation_m(),
                cfg.max_weight,
            )?;
            for (f, (mask, pose)) in frames.iter().zip(eroded.iter().zip(&trajectory)) {
                volume.integrate_frame(&f.depth, mask, intrinsics, pose, cfg.max_range_m)?;
            }
            let cloud = volume.extract_surface();
            Ok(FusionOutput {
                volume,
                cloud,
                trajectory,
            })
        }
        TrackingMode::FrameToModel => {
            let BoundsPolicy::Fixed { min, max } = cfg.bounds else {
                unreachable!("validate() rejects auto bounds with frame_to_model");
            };
            let (origin, dims) = fixed_grid(min, max, cfg.voxel_size);
            let mut volume = TsdfVolume::new(
                origin,
                dims,
                cfg.voxel_size,
                cfg.truncation_m(),
                cfg.max_weight,
            )?;
            let mut trajectory = vec![RigidTransform::identity()];
            volume.integrate_frame(
                &frames[0].depth,
                &eroded[0],
                intrinsics,
                &trajectory[0],
                cfg.max_range_m,
            )?;
            for i in 1..frames.len() {
                let model = volume.extract_surface();
                let init = trajectory[i - 1];
                let result = register(&clouds[i], &model, &init, &cfg.tracking_registration)
                    .map_err(|e| FusionError::Tracking {
                        frame: i,
                        source: Box::new(e),
                    })?;
                if !result.converged {
                    return Err(FusionError::TrackingDidNotConverge { frame: i });
                }
                trajectory.push(result.transform);
                volume.integrate_frame(
                    &frames[i].depth,
                    &eroded[i],
                    intrinsics,
                    &trajectory[i],
                    cfg.max_range_m,
                )?;
            }
            let cloud = volume.extract_surface();
            Ok(FusionOutput {
                volume,
                cloud,
                trajectory,
            })
        }
    }
}

/// Load every frame of a manifest from disk and fuse it.
pub fn fuse_manifest(manifest: &Manifest, cfg: &FusionConfig) -> Result<FusionOutput, FusionError> {
    let frames: Vec<FusionFrame> = manifest
        .frames
        .iter()
        .map(|rec| -> Result<FusionFrame, FusionError> {
            Ok(FusionFrame {
                depth: load_depth_pgm(&rec.depth_path)?,
                mask: load_mask_pgm(&rec.mask_path)?,
                pose: rec.pose,
                timestamp: rec.timestamp,
            })
        })
        .collect::<Result<_, _>>()?;
    fuse_sequence(&manifest.intrinsics, &frames, cfg)
}

fn fixed_grid(min: [f64; 3], max: [f64; 3], voxel: f64) -> (Vec3, [usize; 3]) {
    let origin = Vec3::new(min[0], min[1], min[2]);
    let dims = [
        (((max[0] - min[0]) / voxel).ceil() as usize).max(1),
        (((max[1] - min[1]) / voxel).ceil() as usize).max(1),
        (((max[2] - min[2]) / voxel).ceil() as usize).max(1),
    ];
    (origin, dims)
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    dtype: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct VolumeSidecar {
    origin_m: [f64; 3],
    voxel_size_m: f64,
    truncation_m: f64,
    max_weight: f64,
    dims: [usize; 3],
    byte_order: String,
    arrays: Vec<ArrayMeta>,
}

/// Dump the volume as raw little-endian arrays (tsdf f64, weight f32, label
/// votes u16 interleaved per class) plus a JSON sidecar describing the
/// layout.
pub fn save_volume(
    volume: &TsdfVolume,
    bin_path: impl AsRef<Path>,
    json_path: impl AsRef<Path>,
) -> Result<(), FusionError> {
    let bin_path = bin_path.as_ref();
    let json_path = json_path.as_ref();
    let n = volume.voxel_count();
    let sidecar = VolumeSidecar {
        origin_m: [volume.origin.x, volume.origin.y, volume.origin.z],
        voxel_size_m: volume.voxel_size,
        truncation_m: volume.truncation,
        max_weight: volume.max_weight as f64,
        dims: volume.dims,
        byte_order: "little_endian".into(),
        arrays: vec![
            ArrayMeta {
                name: "tsdf".into(),
                dtype: "f64".into(),
                count: n,
            },
            ArrayMeta {
                name: "weight".into(),
                dtype: "f32".into(),
                count: n,
            },
            ArrayMeta {
                name: "label_votes".into(),
                dtype: "u16".into(),
                count: 3 * n,
            },
        ],
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(json_path, json + "\n").map_err(|e| io_err(json_path, e))?;

    let file = std::fs::File::create(bin_path).map_err(|e| io_err(bin_path, e))?;
    let mut w = BufWriter::new(file);
    for t in &volume.tsdf {
        w.write_all(&t.to_le_bytes()).map_err(|e| io_err(bin_path, e))?;
    }
    for wt in &volume.weight {
        w.write_all(&wt.to_le_bytes()).map_err(|e| io_err(bin_path, e))?;
    }
    for v in &volume.votes {
        for class in v {
            w.write_all(&class.to_le_bytes()).map_err(|e| io_err(bin_path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(bin_path, e))
}

/// Inverse of [`save_volume`].
pub fn load_volume(
    bin_path: impl AsRef<Path>,
    json_path: impl AsRef<Path>,
) -> Result<TsdfVolume, FusionError> {
    let bin_path = bin_path.as_ref();
    let json_path = json_path.as_ref();
    let text = std::fs::read_to_string(json_path).map_err(|e| io_err(json_path, e))?;
    let sidecar: VolumeSidecar =
        serde_json::from_str(&text).map_err(|e| FusionError::Sidecar {
            path: json_path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let bad = |detail: String| FusionError::Sidecar {
        path: json_path.to_path_buf(),
        detail,
    };
    if sidecar.byte_order != "little_endian" {
        return Err(bad(format!("unsupported byte order {:?}", sidecar.byte_order)));
    }
    let n = sidecar.dims[0]
        .checked_mul(sidecar.dims[1])
        .and_then(|p| p.checked_mul(sidecar.dims[2]))
        .ok_or_else(|| bad(format!("dims overflow: {:?}", sidecar.dims)))?;
    let expected = [("tsdf", n), ("weight", n), ("label_votes", 3 * n)];
    if sidecar.arrays.len() != expected.len() {
        return Err(bad(format!("expected 3 arrays, found {}", sidecar.arrays.len())));
    }
    for (meta, (name, count)) in sidecar.arrays.iter().zip(expected) {
        if meta.name != name || meta.count != count {
            return Err(bad(format!(
                "array {:?} with {} entries, expected {:?} with {}",
                meta.name, meta.count, name, count
            )));
        }
    }
    let mut volume = TsdfVolume::new(
        Vec3::new(sidecar.origin_m[0], sidecar.origin_m[1], sidecar.origin_m[2]),
        sidecar.dims,
        sidecar.voxel_size_m,
        sidecar.truncation_m,
        sidecar.max_weight,
    )?;
    let file = std::fs::File::open(bin_path).map_err(|e| io_err(bin_path, e))?;
    let mut r = std::io::BufReader::new(file);
    let expected_bytes = (8 + 4 + 6) * n as u64;
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf).map_err(|e| io_err(bin_path, e))?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        volume.tsdf[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    buf.truncate(4 * n);
    r.read_exact(&mut buf).map_err(|e| io_err(bin_path, e))?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        volume.weight[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    }
    buf.resize(6 * n, 0);
    r.read_exact(&mut buf).map_err(|e| io_err(bin_path, e))?;
    for (i, chunk) in buf.chunks_exact(2).enumerate() {
        volume.votes[i / 3][i % 3] = u16::from_le_bytes(chunk.try_into().expect("2-byte chunk"));
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(volume),
        Ok(_) => Err(bad(format!("binary longer than the declared {expected_bytes} bytes"))),
        Err(e) => Err(io_err(bin_path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use crate::geometry::Twist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(64, 48, 50.0, 50.0, 31.5, 23.5, 0.001).unwrap()
    }

    /// Constant-depth frame: a fronto-parallel plane fills the image.
    fn plane_frame(k: &CameraIntrinsics, depth_m: f64, code: u8) -> (DepthImage, MaskImage) {
        let mut depth = DepthImage::zeros(k.width, k.height);
        let mut mask = MaskImage::background(k.width, k.height);
        let sample = (depth_m / k.depth_scale).round() as u16;
        for v in 0..k.height {
            for u in 0..k.width {
                depth.set(u, v, sample);
                mask.set(u, v, code);
            }
        }
        (depth, mask)
    }

    /// Volume straddling z = 1 whose voxel layer 12 is centered exactly on
    /// the plane.
    fn plane_volume() -> TsdfVolume {
        TsdfVolume::new(
            Vec3::new(-0.02, -0.02, 0.95),
            [10, 10, 25],
            0.004,
            0.016,
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn plane_surface_voxel_lands_near_zero() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 1);
        let mut v = plane_volume();
        v.integrate_frame(&depth, &mask, &k, &RigidTransform::identity(), 3.0)
            .unwrap();
        // Layer 12 sits on the plane, layer 10 is truncation/2 in front.
        for x in 0..10 {
            for y in 0..10 {
                assert!(v.weight_at(x, y, 12) > 0.0);
                assert!(
                    v.tsdf_at(x, y, 12).abs() < 0.004 / 0.016,
                    "surface voxel tsdf {}",
                    v.tsdf_at(x, y, 12)
                );
                assert!(
                    (v.tsdf_at(x, y, 10) - 0.5).abs() < 0.1,
                    "half-band voxel tsdf {}",
                    v.tsdf_at(x, y, 10)
                );
                assert_eq!(v.votes_at(x, y, 12), [1, 0, 0]);
            }
        }
    }

    #[test]
    fn tsdf_bounds_and_weight_cap_hold() {
        let k = small_intrinsics();
        let mut v = TsdfVolume::new(Vec3::new(-0.02, -0.02, 0.9), [10, 10, 40], 0.004, 0.016, 3.0)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..8 {
            let d = rng.gen_range(0.95..1.05);
            let code = rng.gen_range(1..=3);
            let (depth, mask) = plane_frame(&k, d, code);
            v.integrate_frame(&depth, &mask, &k, &RigidTransform::identity(), 3.0)
                .unwrap();
        }
        for z in 0..40 {
            for y in 0..10 {
                for x in 0..10 {
                    let t = v.tsdf_at(x, y, z);
                    let w = v.weight_at(x, y, z);
                    assert!((-1.0..=1.0).contains(&t), "tsdf {t} out of range");
                    assert!((0.0..=3.0).contains(&w), "weight {w} out of cap");
                }
            }
        }
    }

    #[test]
    fn repeated_frame_doubles_weight_and_fixes_tsdf() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 2);
        let mut once = plane_volume();
        once.integrate_frame(&depth, &mask, &k, &RigidTransform::identity(), 3.0)
            .unwrap();
        let mut twice = plane_volume();
        for _ in 0..2 {
            twice
                .integrate_frame(&depth, &mask, &k, &RigidTransform::identity(), 3.0)
                .unwrap();
        }
        for z in 0..25 {
            for y in 0..10 {
                for x in 0..10 {
                    assert_eq!(once.tsdf_at(x, y, z), twice.tsdf_at(x, y, z));
                    assert_eq!(twice.weight_at(x, y, z), 2.0 * once.weight_at(x, y, z));
                    assert_eq!(twice.votes_at(x, y, z)[1], 2 * once.votes_at(x, y, z)[1]);
                }
            }
        }
    }

    #[test]
    fn integration_matches_brute_force_oracle() {
        // Independent per-voxel recomputation of the update rule, including
        // carving, the range cutoff, invalid samples, and votes.
        let k = CameraIntrinsics::new(16, 12, 12.0, 12.0, 7.5, 5.5, 0.001).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut frames = Vec::new();
        for _ in 0..3 {
            let mut depth = DepthImage::zeros(16, 12);
            let mut mask = MaskImage::background(16, 12);
            for v in 0..12 {
                for u in 0..16 {
                    let invalid = rng.gen_bool(0.1);
                    let sample = if invalid {
                        0
                    } else {
                        rng.gen_range(400..4000)
                    };
                    depth.set(u, v, sample);
                    mask.set(u, v, rng.gen_range(0..=3));
                }
            }
            let pose = se3_exp(&Twist::new(
                Vec3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ),
                Vec3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ),
            ));
            frames.push((depth, mask, pose));
        }
        let origin = Vec3::new(-0.4, -0.3, 0.2);
        let dims = [8, 6, 10];
        let (voxel, trunc, cap, max_range) = (0.1, 0.2, 2.0, 3.0);
        let mut vol = TsdfVolume::new(origin, dims, voxel, trunc, cap).unwrap();
        for (depth, mask, pose) in &frames {
            vol.integrate_frame(depth, mask, &k, pose, max_range).unwrap();
        }

        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let center = origin
                        + Vec3::new(
                            (x as f64 + 0.5) * voxel,
                            (y as f64 + 0.5) * voxel,
                            (z as f64 + 0.5) * voxel,
                        );
                    let mut t = 0.0f64;
                    let mut w = 0.0f32;
                    let mut votes = [0u16; 3];
                    for (depth, mask, pose) in &frames {
                        let p = pose.inverse().apply(&center);
                        if p.z <= 0.0 {
                            continue;
                        }
                        let u = (p.x * k.fx / p.z + k.cx).round();
                        let v = (p.y * k.fy / p.z + k.cy).round();
                        if u < 0.0 || u >= 16.0 || v < 0.0 || v >= 12.0 {
                            continue;
                        }
                        let sample = depth.get(u as u32, v as u32);
                        if sample == 0 {
                            continue;
                        }
                        let d = sample as f64 * 0.001;
                        if d > max_range {
                            continue;
                        }
                        let sdf = d - p.z;
                        let code = mask.get(u as u32, v as u32);
                        let obs = if code == 0 {
                            if sdf >= trunc {
                                1.0
                            } else {
                                continue;
                            }
                        } else if sdf > -trunc {
                            (sdf / trunc).clamp(-1.0, 1.0)
                        } else {
                            continue;
                        };
                        t = (t * w as f64 + obs) / (w as f64 + 1.0);
                        w = (w + 1.0).min(cap as f32);
                        if code != 0 {
                            votes[code as usize - 1] += 1;
                        }
                    }
                    assert_eq!(vol.tsdf_at(x, y, z), t, "tsdf at ({x},{y},{z})");
                    assert_eq!(vol.weight_at(x, y, z), w as f64, "weight at ({x},{y},{z})");
                    assert_eq!(vol.votes_at(x, y, z), votes, "votes at ({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn background_carves_only_past_the_band() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 0);
        let mut v = plane_volume();
        v.integrate_frame(&depth, &mask, &k, &RigidTransform::identity(), 3.0)
            .unwrap();
        // Centers: z = 0.95 + (i + 0.5) * 0.004. sdf >= 0.016 means
        // z <= 0.984, i.e. layers 0..=8.
        for z in 0..25 {
            let w = v.weight_at(5, 5, z);
            let t = v.tsdf_at(5, 5, z);
            if z <= 8 {
                assert!(w > 0.0 && t == 1.0, "layer {z} should be carved, got w={w} t={t}");
            } else {
                assert_eq!(w, 0.0, "layer {z} must stay unobserved");
            }
            assert_eq!(v.votes_at(5, 5, z), [0, 0, 0]);
        }
    }

    #[test]
    fn frame_order_barely_moves_uncapped_tsdf() {
        let k = small_intrinsics();
        let depths = [1.0, 0.997, 1.003, 1.001, 0.999, 1.002];
        let frames: Vec<(DepthImage, MaskImage)> = depths
            .iter()
            .map(|&d| plane_frame(&k, d, 1))
            .collect();
        let fuse_in_order = |order: &[usize]| {
            let mut v = plane_volume();
            for &i in order {
                v.integrate_frame(&frames[i].0, &frames[i].1, &k, &RigidTransform::identity(), 3.0)
                    .unwrap();
            }
            v
        };
        let a = fuse_in_order(&[0, 1, 2, 3, 4, 5]);
        let b = fuse_in_order(&[5, 3, 1, 4, 0, 2]);
        for z in 0..25 {
            for y in 0..10 {
                for x in 0..10 {
                    assert_eq!(a.weight_at(x, y, z), b.weight_at(x, y, z));
                    let d = (a.tsdf_at(x, y, z) - b.tsdf_at(x, y, z)).abs();
                    assert!(d < 1e-9, "permutation moved tsdf by {d} at ({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn extracted_plane_sits_on_the_surface() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 1);
        let mut v = plane_volume();
        v.integrate_frame(&depth, &mask, &k, &RigidTransform::identity(), 3.0)
            .unwrap();
        let cloud = v.extract_surface();
        assert!(!cloud.is_empty());
        let mut sq_sum = 0.0;
        for (p, label) in cloud.iter() {
            assert!((p.z - 1.0).abs() <= 0.002, "point z {} off the plane", p.z);
            assert_eq!(label, PointLabel::Trunk);
            sq_sum += (p.z - 1.0) * (p.z - 1.0);
        }
        let rms = (sq_sum / cloud.len() as f64).sqrt();
        assert!(rms < 0.001, "plane rms {rms}");
    }

    #[test]
    fn empty_volume_extracts_empty_cloud() {
        let v = plane_volume();
        assert!(v.extract_surface().is_empty());
        assert_eq!(v.observed_voxels(), 0);
    }

    #[test]
    fn extraction_order_is_axis_then_row_major() {
        // Two crossings planted by hand: one x-adjacent, one z-adjacent.
        // The x pass must emit first regardless of spatial position.
        let mut v =
            TsdfVolume::new(Vec3::zeros(), [3, 2, 3], 0.01, 0.02, 10.0).unwrap();
        let plant = |v: &mut TsdfVolume, x: usize, y: usize, z: usize, t: f64| {
            let i = v.index(x, y, z);
            v.tsdf[i] = t;
            v.weight[i] = 1.0;
        };
        plant(&mut v, 1, 1, 2, 0.5);
        plant(&mut v, 2, 1, 2, -0.5); // x crossing, late in scan order
        plant(&mut v, 0, 0, 0, 0.5);
        plant(&mut v, 0, 0, 1, -0.5); // z crossing, early position
        let cloud = v.extract_surface();
        assert_eq!(cloud.len(), 2);
        // First point from the x pass at (1.5, 1, 2)+0.5 scaling.
        assert!((cloud.points()[0] - Vec3::new(0.02, 0.015, 0.025)).norm() < 1e-12);
        assert!((cloud.points()[1] - Vec3::new(0.005, 0.005, 0.010)).norm() < 1e-12);
        let again = v.extract_surface();
        assert_eq!(cloud.points(), again.points());
        assert_eq!(cloud.labels(), again.labels());
    }

    #[test]
    fn crossing_labels_follow_majority_and_tie_rules() {
        assert_eq!(crossing_label([3, 1, 0], [2, 1, 0]), PointLabel::Trunk);
        assert_eq!(crossing_label([0, 4, 1], [1, 2, 2]), PointLabel::Branch);
        assert_eq!(crossing_label([0, 0, 5], [0, 4, 4]), PointLabel::Clutter);
        // Equal trunk and branch totals fall to the lower code.
        assert_eq!(crossing_label([2, 2, 0], [1, 1, 0]), PointLabel::Trunk);
        assert_eq!(crossing_label([0, 3, 3], [0, 0, 0]), PointLabel::Branch);
        // No votes at all: trunk.
        assert_eq!(crossing_label([0, 0, 0], [0, 0, 0]), PointLabel::Trunk);
    }

    /// Look-at pose: camera at `eye`, optical axis toward `target`, image
    /// +y pointing down in world z.
    fn look_at(eye: Vec3, target: Vec3) -> RigidTransform {
        let z_c = (target - eye).normalize();
        let x_c = Vec3::new(0.0, 0.0, -1.0).cross(&z_c).normalize();
        let y_c = z_c.cross(&x_c);
        let r = nalgebra::Matrix3::from_columns(&[x_c, y_c, z_c]);
        RigidTransform::from_parts(r, eye).unwrap()
    }

    /// Render a vertical cylinder (axis x = y = 0, radius r, z in
    /// [z_lo, z_hi]) into a depth/mask frame from `pose`.
    fn render_cylinder(
        k: &CameraIntrinsics,
        pose: &RigidTransform,
        r: f64,
        z_lo: f64,
        z_hi: f64,
    ) -> (DepthImage, MaskImage) {
        let mut depth = DepthImage::zeros(k.width, k.height);
        let mut mask = MaskImage::background(k.width, k.height);
        let o = *pose.translation();
        for v in 0..k.height {
            for u in 0..k.width {
                let dir_c = Vec3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let d = pose.rotation() * dir_c;
                let a = d.x * d.x + d.y * d.y;
                let b = 2.0 * (o.x * d.x + o.y * d.y);
                let c = o.x * o.x + o.y * o.y - r * r;
                let disc = b * b - 4.0 * a * c;
                if disc <= 0.0 || a == 0.0 {
                    continue;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 0.0 {
                    continue;
                }
                let hit_z = o.z + t * d.z;
                if hit_z < z_lo || hit_z > z_hi {
                    continue;
                }
                // dir_c.z == 1, so the ray parameter is the camera depth.
                depth.set(u, v, (t / k.depth_scale).round() as u16);
                mask.set(u, v, PointLabel::Trunk.code());
            }
        }
        (depth, mask)
    }

    #[test]
    fn fused_cylinder_radius_matches_truth() {
        let k = CameraIntrinsics::new(320, 240, 300.0, 300.0, 159.5, 119.5, 0.001).unwrap();
        let radius = 0.04;
        let frames: Vec<FusionFrame> = (0..12)
            .map(|i| {
                let ang = i as f64 / 12.0 * std::f64::consts::TAU;
                let eye = Vec3::new(0.6 * ang.cos(), 0.6 * ang.sin(), 0.5);
                let pose = look_at(eye, Vec3::new(0.0, 0.0, 0.5));
                let (depth, mask) = render_cylinder(&k, &pose, radius, 0.3, 0.7);
                FusionFrame {
                    depth,
                    mask,
                    pose: Some(pose),
                    timestamp: None,
                }
            })
            .collect();
        let cfg = FusionConfig::default();
        let out = fuse_sequence(&k, &frames, &cfg).unwrap();
        assert_eq!(out.trajectory.len(), 12);
        assert!(out.cloud.len() > 1000, "only {} surface points", out.cloud.len());
        let mut radial_sum = 0.0;
        let mut used = 0usize;
        for p in out.cloud.points() {
            // Stay clear of the open ends where the band is one-sided.
            if p.z > 0.35 && p.z < 0.65 {
                radial_sum += (p.x * p.x + p.y * p.y).sqrt();
                used += 1;
            }
        }
        let mean_r = radial_sum / used as f64;
        assert!(
            (mean_r - radius).abs() < 0.002,
            "mean radius {mean_r} vs truth {radius}"
        );
    }

    /// Render three orthogonal finite planes (x=0, y=0, z=0, extents
    /// [0, 0.6]) with distinct labels.
    fn render_corner(k: &CameraIntrinsics, pose: &RigidTransform) -> (DepthImage, MaskImage) {
        let mut depth = DepthImage::zeros(k.width, k.height);
        let mut mask = MaskImage::background(k.width, k.height);
        let o = *pose.translation();
        for v in 0..k.height {
            for u in 0..k.width {
                let dir_c = Vec3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let d = pose.rotation() * dir_c;
                let mut best: Option<(f64, u8)> = None;
                for (axis, code) in [(0usize, 1u8), (1, 2), (2, 3)] {
                    if d[axis] >= 0.0 {
                        continue;
                    }
                    let t = -o[axis] / d[axis];
                    if t <= 0.0 {
                        continue;
                    }
                    let hit = o + d * t;
                    let (p, q) = match axis {
                        0 => (hit.y, hit.z),
                        1 => (hit.x, hit.z),
                        _ => (hit.x, hit.y),
                    };
                    if !(0.0..=0.6).contains(&p) || !(0.0..=0.6).contains(&q) {
                        continue;
                    }
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, code));
                    }
                }
                if let Some((t, code)) = best {
                    depth.set(u, v, (t / k.depth_scale).round() as u16);
                    mask.set(u, v, code);
                }
            }
        }
        (depth, mask)
    }

    #[test]
    fn frame_to_model_tracks_camera_motion() {
        let k = CameraIntrinsics::new(160, 120, 120.0, 120.0, 79.5, 59.5, 0.001).unwrap();
        let base = look_at(Vec3::new(0.9, 0.95, 1.0), Vec3::new(0.15, 0.15, 0.15));
        let true_poses: Vec<RigidTransform> = (0..5)
            .map(|i| {
                let s = i as f64;
                se3_exp(&Twist::new(
                    Vec3::new(0.004 * s, -0.003 * s, 0.005 * s),
                    Vec3::new(0.006 * s, 0.004 * s, -0.005 * s),
                ))
                .compose(&base)
            })
            .collect();
        let frames: Vec<FusionFrame> = true_poses
            .iter()
            .map(|pose| {
                let (depth, mask) = render_corner(&k, pose);
                FusionFrame {
                    depth,
                    mask,
                    pose: None,
                    timestamp: None,
                }
            })
            .collect();
        // The volume lives in frame-0 camera coordinates: the corner sits
        // roughly 1.0 to 1.7 m in front of the first camera.
        let mut cfg = FusionConfig {
            voxel_size: 0.01,
            tracking: TrackingMode::FrameToModel,
            bounds: BoundsPolicy::Fixed {
                min: [-0.6, -0.6, 0.9],
                max: [0.6, 0.6, 1.8],
            },
            erode_px: 1,
            ..FusionConfig::default()
        };
        cfg.tracking_registration.voxel_size = 0.03;
        let out = fuse_sequence(&k, &frames, &cfg).unwrap();
        assert_eq!(out.trajectory.len(), 5);
        assert_eq!(out.trajectory[0].to_row_major(), RigidTransform::identity().to_row_major());
        for (i, est) in out.trajectory.iter().enumerate() {
            // The model lives in frame-0 camera coordinates.
            let truth = true_poses[0].inverse().compose(&true_poses[i]);
            let rel = est.compose(&truth.inverse());
            let rot = rel.rotation_angle();
            let trans = (est.translation() - truth.translation()).norm();
            assert!(rot < 0.0175, "frame {i} rotation error {rot} rad");
            assert!(trans < 0.010, "frame {i} translation error {trans} m");
        }
        // Labels survive fusion: points near each plane carry its class.
        let mut plane_hits = [0usize; 3];
        let mut plane_correct = [0usize; 3];
        for (p, label) in out.cloud.iter() {
            let world = true_poses[0].apply(p);
            for (axis, class) in [(0, PointLabel::Trunk), (1, PointLabel::Branch), (2, PointLabel::Clutter)] {
                if world[axis].abs() < 0.004
                    && world[(axis + 1) % 3] > 0.05
                    && world[(axis + 2) % 3] > 0.05
                {
                    plane_hits[axis] += 1;
                    if label == class {
                        plane_correct[axis] += 1;
                    }
                }
            }
        }
        for axis in 0..3 {
            assert!(plane_hits[axis] > 100, "plane {axis} has {} points", plane_hits[axis]);
            let frac = plane_correct[axis] as f64 / plane_hits[axis] as f64;
            assert!(frac > 0.9, "plane {axis} label accuracy {frac}");
        }
    }

    #[test]
    fn manifest_poses_mode_requires_poses() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 1);
        let frames = vec![FusionFrame {
            depth,
            mask,
            pose: None,
            timestamp: None,
        }];
        let err = fuse_sequence(&k, &frames, &FusionConfig::default()).unwrap_err();
        assert!(matches!(err, FusionError::MissingPose { frame: 0 }));
    }

    #[test]
    fn single_posed_frame_round_trips_through_fuse_sequence() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 1);
        let pose = RigidTransform::identity();
        let frames = vec![FusionFrame {
            depth: depth.clone(),
            mask: mask.clone(),
            pose: Some(pose),
            timestamp: Some(0.0),
        }];
        let out = fuse_sequence(&k, &frames, &FusionConfig::default()).unwrap();
        assert_eq!(out.trajectory.len(), 1);
        assert_eq!(out.trajectory[0].to_row_major(), pose.to_row_major());
        assert!(!out.cloud.is_empty());
        // The same frame integrated by hand into an equally shaped volume
        // gives the same surface.
        let mut manual = TsdfVolume::new(
            out.volume.origin(),
            out.volume.dims(),
            out.volume.voxel_size(),
            out.volume.truncation(),
            out.volume.max_weight(),
        )
        .unwrap();
        let eroded = erode_mask(&mask, FusionConfig::default().erode_px);
        manual
            .integrate_frame(&depth, &eroded, &k, &pose, 3.0)
            .unwrap();
        assert_eq!(manual.extract_surface().points(), out.cloud.points());
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut cfg = FusionConfig::default();
        cfg.voxel_size = 0.0;
        assert!(matches!(cfg.validate(), Err(FusionError::BadConfig { .. })));

        let mut cfg = FusionConfig::default();
        cfg.truncation = Some(0.001);
        assert!(cfg.validate().is_err(), "truncation below voxel accepted");

        let mut cfg = FusionConfig::default();
        cfg.max_weight = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = FusionConfig::default();
        cfg.tracking = TrackingMode::FrameToModel;
        assert!(cfg.validate().is_err(), "frame_to_model with auto bounds accepted");
        cfg.bounds = BoundsPolicy::tree_box();
        assert!(cfg.validate().is_ok());

        let mut cfg = FusionConfig::default();
        cfg.bounds = BoundsPolicy::Fixed {
            min: [0.0, 0.0, 0.0],
            max: [0.0, 1.0, 1.0],
        };
        assert!(cfg.validate().is_err(), "degenerate fixed box accepted");
    }

    #[test]
    fn oversized_volume_is_refused_before_allocation() {
        let err = TsdfVolume::new(Vec3::zeros(), [10000, 10000, 10000], 0.004, 0.016, 100.0)
            .unwrap_err();
        assert!(matches!(err, FusionError::VolumeTooLarge { .. }));
    }

    #[test]
    fn volume_dump_round_trips_exactly() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 2);
        let mut v = plane_volume();
        v.integrate_frame(&depth, &mask, &k, &RigidTransform::identity(), 3.0)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("volume.bin");
        let json = dir.path().join("volume.json");
        save_volume(&v, &bin, &json).unwrap();
        let loaded = load_volume(&bin, &json).unwrap();
        assert_eq!(loaded, v);

        // A truncated binary is rejected.
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_volume(&bin, &json).is_err());
    }

    #[test]
    fn fuse_manifest_loads_frames_from_disk() {
        let k = small_intrinsics();
        let (depth, mask) = plane_frame(&k, 1.0, 1);
        let dir = tempfile::tempdir().unwrap();
        crate::ingest::save_depth_pgm(&depth, dir.path().join("d0.pgm")).unwrap();
        crate::ingest::save_mask_pgm(&mask, dir.path().join("m0.pgm")).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        crate::ingest::manifest_save(
            &manifest_path,
            &k,
            &[(
                "d0.pgm".to_string(),
                "m0.pgm".to_string(),
                Some(RigidTransform::identity()),
                Some(0.5),
            )],
        )
        .unwrap();
        let manifest = crate::ingest::manifest_load(&manifest_path).unwrap();
        let out = fuse_manifest(&manifest, &FusionConfig::default()).unwrap();
        assert_eq!(out.trajectory.len(), 1);
        assert!(!out.cloud.is_empty());
    }
}
