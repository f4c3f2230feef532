//! Capture manifest: one JSON document naming the camera intrinsics and the
//! per-frame depth/mask files, with optional camera-to-world poses.
//!
//! Frame paths are resolved relative to the manifest's directory. Validation
//! failures name the offending field path (`intrinsics.fx`, `frames[2].pose`)
//! so a broken capture can be fixed without spelunking.

use super::{io_err, IngestError};
use crate::geometry::{CameraIntrinsics, GeometryError, RigidTransform};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub depth_path: PathBuf,
    pub mask_path: PathBuf,
    /// Camera-to-world pose, when the capture rig tracked one.
    pub pose: Option<RigidTransform>,
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    intrinsics: IntrinsicsDoc,
    frames: Vec<FrameDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsDoc {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    depth_scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    depth: String,
    mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamp: Option<f64>,
}

pub fn manifest_load(path: impl AsRef<Path>) -> Result<Manifest, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let doc: ManifestDoc =
        serde_json::from_slice(&bytes).map_err(|e| IngestError::ManifestParse {
            detail: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let i = &doc.intrinsics;
    let intrinsics = CameraIntrinsics::new(i.width, i.height, i.fx, i.fy, i.cx, i.cy, i.depth_scale)
        .map_err(|e| match e {
            GeometryError::InvalidIntrinsics { field, detail } => IngestError::ManifestField {
                field: format!("intrinsics.{field}"),
                detail,
            },
            other => IngestError::Geometry(other),
        })?;

    let mut frames = Vec::with_capacity(doc.frames.len());
    for (index, frame) in doc.frames.iter().enumerate() {
        if frame.depth.is_empty() {
            return Err(IngestError::ManifestField {
                field: format!("frames[{index}].depth"),
                detail: "empty path".to_string(),
            });
        }
        if frame.mask.is_empty() {
            return Err(IngestError::ManifestField {
                field: format!("frames[{index}].mask"),
                detail: "empty path".to_string(),
            });
        }
        let pose = match &frame.pose {
            None => None,
            Some(values) => {
                let arr: [f64; 16] =
                    values
                        .as_slice()
                        .try_into()
                        .map_err(|_| IngestError::ManifestField {
                            field: format!("frames[{index}].pose"),
                            detail: format!("needs 16 row-major values, got {}", values.len()),
                        })?;
                Some(RigidTransform::from_row_major(&arr).map_err(|e| {
                    IngestError::ManifestField {
                        field: format!("frames[{index}].pose"),
                        detail: e.to_string(),
                    }
                })?)
            }
        };
        frames.push(FrameRecord {
            depth_path: base.join(&frame.depth),
            mask_path: base.join(&frame.mask),
            pose,
            timestamp: frame.timestamp,
        });
    }
    Ok(Manifest { intrinsics, frames })
}

/// Writes a manifest whose frame entries are the given relative paths.
pub fn manifest_save(
    path: impl AsRef<Path>,
    intrinsics: &CameraIntrinsics,
    frames: &[(String, String, Option<RigidTransform>, Option<f64>)],
) -> Result<(), IngestError> {
    let path = path.as_ref();
    let doc = ManifestDoc {
        intrinsics: IntrinsicsDoc {
            width: intrinsics.width,
            height: intrinsics.height,
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            depth_scale: intrinsics.depth_scale,
        },
        frames: frames
            .iter()
            .map(|(depth, mask, pose, timestamp)| FrameDoc {
                depth: depth.clone(),
                mask: mask.clone(),
                pose: pose.map(|p| p.to_row_major().to_vec()),
                timestamp: *timestamp,
            })
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&doc).expect("manifest serialization is infallible");
    json.push(b'\n');
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}
