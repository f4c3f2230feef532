//! PLY point cloud IO.
//!
//! Supported layout: a single `vertex` element with `float x, y, z` and an
//! optional `uchar label`, in ASCII or binary little-endian form. Files
//! without the label property load with every point labeled Trunk so plain
//! geometry from other tools can still be ingested; anything else in the
//! header is rejected rather than guessed at. The writer defaults to binary
//! little-endian and always writes the label column. Coordinates are stored
//! as f32 on disk, so a write/read round trip quantizes to f32 once and is
//! byte-stable afterwards.

use super::{io_err, IngestError};
use crate::geometry::{LabeledPointCloud, PointLabel, Vec3};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    #[default]
    BinaryLittleEndian,
    Ascii,
}

pub fn encode_ply(cloud: &LabeledPointCloud, format: PlyFormat) -> Result<Vec<u8>, IngestError> {
    for (i, p) in cloud.points().iter().enumerate() {
        let ok = [p.x, p.y, p.z]
            .iter()
            .all(|&c| c.is_finite() && c.abs() <= f32::MAX as f64);
        if !ok {
            return Err(IngestError::PlyVertex {
                index: i,
                detail: "coordinate not representable as f32".to_string(),
            });
        }
    }
    let format_line = match format {
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::Ascii => "ascii",
    };
    let mut out = format!(
        "ply\nformat {} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar label\nend_header\n",
        format_line,
        cloud.len()
    )
    .into_bytes();
    match format {
        PlyFormat::BinaryLittleEndian => {
            out.reserve(cloud.len() * 13);
            for (p, label) in cloud.iter() {
                out.extend_from_slice(&(p.x as f32).to_le_bytes());
                out.extend_from_slice(&(p.y as f32).to_le_bytes());
                out.extend_from_slice(&(p.z as f32).to_le_bytes());
                out.push(label.code());
            }
        }
        PlyFormat::Ascii => {
            for (p, label) in cloud.iter() {
                // Shortest f32 round-trip formatting keeps ASCII and binary
                // forms loss-equivalent.
                out.extend_from_slice(
                    format!("{} {} {} {}\n", p.x as f32, p.y as f32, p.z as f32, label.code())
                        .as_bytes(),
                );
            }
        }
    }
    Ok(out)
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    has_label: bool,
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, IngestError> {
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| IngestError::PlyParse {
                detail: "header has no end_header line".to_string(),
            })?;
        let raw = &bytes[pos..pos + end];
        let line = std::str::from_utf8(raw)
            .map_err(|_| IngestError::PlyParse {
                detail: "non-utf8 header line".to_string(),
            })?
            .trim_end_matches('\r')
            .to_string();
        pos += end + 1;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
        if pos >= bytes.len() {
            return Err(IngestError::PlyParse {
                detail: "header has no end_header line".to_string(),
            });
        }
    }

    if lines.first().map(String::as_str) != Some("ply") {
        return Err(IngestError::PlyParse {
            detail: "missing ply magic line".to_string(),
        });
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties: Vec<(String, String)> = Vec::new();
    for line in &lines[1..lines.len() - 1] {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("comment") | None => {}
            Some("format") => {
                let kind = words.next().unwrap_or("");
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(IngestError::PlyParse {
                            detail: format!("unsupported format {other:?}"),
                        })
                    }
                });
            }
            Some("element") => {
                let name = words.next().unwrap_or("");
                if name != "vertex" || vertex_count.is_some() {
                    return Err(IngestError::PlyParse {
                        detail: format!("unsupported element {name:?} (single vertex element only)"),
                    });
                }
                let count: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| IngestError::PlyParse {
                        detail: "element vertex missing count".to_string(),
                    })?;
                vertex_count = Some(count);
            }
            Some("property") => {
                let ty = words.next().unwrap_or("").to_string();
                let name = words.next().unwrap_or("").to_string();
                properties.push((ty, name));
            }
            Some(other) => {
                return Err(IngestError::PlyParse {
                    detail: format!("unsupported header keyword {other:?}"),
                })
            }
        }
    }
    let format = format.ok_or_else(|| IngestError::PlyParse {
        detail: "missing format line".to_string(),
    })?;
    let vertex_count = vertex_count.ok_or_else(|| IngestError::PlyParse {
        detail: "missing element vertex line".to_string(),
    })?;

    let float_ok = |ty: &str| ty == "float" || ty == "float32";
    let uchar_ok = |ty: &str| ty == "uchar" || ty == "uint8";
    let has_label = match properties.len() {
        3 | 4 => {
            let xyz_ok = ["x", "y", "z"]
                .iter()
                .zip(&properties)
                .all(|(want, (ty, name))| float_ok(ty) && name == want);
            let label_ok = properties
                .get(3)
                .map(|(ty, name)| uchar_ok(ty) && name == "label")
                .unwrap_or(true);
            if !(xyz_ok && label_ok) {
                return Err(IngestError::PlyParse {
                    detail: format!("unknown property layout {properties:?}"),
                });
            }
            properties.len() == 4
        }
        _ => {
            return Err(IngestError::PlyParse {
                detail: format!("unknown property layout {properties:?}"),
            })
        }
    };
    Ok(Header {
        format,
        vertex_count,
        has_label,
        payload_start: pos,
    })
}

pub fn decode_ply(bytes: &[u8]) -> Result<LabeledPointCloud, IngestError> {
    let header = parse_header(bytes)?;
    let mut points = Vec::with_capacity(header.vertex_count);
    let mut labels = Vec::with_capacity(header.vertex_count);
    let payload = &bytes[header.payload_start..];
    match header.format {
        PlyFormat::BinaryLittleEndian => {
            let stride = 12 + usize::from(header.has_label);
            let expected = header.vertex_count * stride;
            if payload.len() != expected {
                return Err(IngestError::PlyParse {
                    detail: format!(
                        "binary payload holds {} bytes, {} vertices need {}",
                        payload.len(),
                        header.vertex_count,
                        expected
                    ),
                });
            }
            for (i, rec) in payload.chunks_exact(stride).enumerate() {
                let x = f32::from_le_bytes(rec[0..4].try_into().unwrap());
                let y = f32::from_le_bytes(rec[4..8].try_into().unwrap());
                let z = f32::from_le_bytes(rec[8..12].try_into().unwrap());
                if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                    return Err(IngestError::PlyVertex {
                        index: i,
                        detail: "non-finite coordinate".to_string(),
                    });
                }
                let label = if header.has_label {
                    PointLabel::from_code(rec[12]).map_err(|e| IngestError::PlyVertex {
                        index: i,
                        detail: e.to_string(),
                    })?
                } else {
                    PointLabel::Trunk
                };
                points.push(Vec3::new(x as f64, y as f64, z as f64));
                labels.push(label);
            }
        }
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(payload).map_err(|_| IngestError::PlyParse {
                detail: "non-utf8 ascii payload".to_string(),
            })?;
            let mut rows = text.lines().filter(|l| !l.trim().is_empty());
            for i in 0..header.vertex_count {
                let line = rows.next().ok_or_else(|| IngestError::PlyParse {
                    detail: format!(
                        "ascii payload ends at vertex {i}, header declared {}",
                        header.vertex_count
                    ),
                })?;
                let mut cols = line.split_whitespace();
                let mut coord = |name: &str| -> Result<f64, IngestError> {
                    let word = cols.next().ok_or_else(|| IngestError::PlyVertex {
                        index: i,
                        detail: format!("missing {name}"),
                    })?;
                    let v: f32 = word.parse().map_err(|_| IngestError::PlyVertex {
                        index: i,
                        detail: format!("bad {name} value {word:?}"),
                    })?;
                    if !v.is_finite() {
                        return Err(IngestError::PlyVertex {
                            index: i,
                            detail: "non-finite coordinate".to_string(),
                        });
                    }
                    Ok(v as f64)
                };
                let x = coord("x")?;
                let y = coord("y")?;
                let z = coord("z")?;
                let label = if header.has_label {
                    let word = cols.next().ok_or_else(|| IngestError::PlyVertex {
                        index: i,
                        detail: "missing label".to_string(),
                    })?;
                    let code: u8 = word.parse().map_err(|_| IngestError::PlyVertex {
                        index: i,
                        detail: format!("bad label value {word:?}"),
                    })?;
                    PointLabel::from_code(code).map_err(|e| IngestError::PlyVertex {
                        index: i,
                        detail: e.to_string(),
                    })?
                } else {
                    PointLabel::Trunk
                };
                if cols.next().is_some() {
                    return Err(IngestError::PlyVertex {
                        index: i,
                        detail: "extra columns".to_string(),
                    });
                }
                points.push(Vec3::new(x, y, z));
                labels.push(label);
            }
            if rows.next().is_some() {
                return Err(IngestError::PlyParse {
                    detail: format!(
                        "ascii payload has more rows than the declared {} vertices",
                        header.vertex_count
                    ),
                });
            }
        }
    }
    Ok(LabeledPointCloud::new(points, labels)?)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<LabeledPointCloud, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_ply(&bytes)
}

pub fn save_ply(
    cloud: &LabeledPointCloud,
    path: impl AsRef<Path>,
    format: PlyFormat,
) -> Result<(), IngestError> {
    let path = path.as_ref();
    std::fs::write(path, encode_ply(cloud, format)?).map_err(|e| io_err(path, e))
}
