//! Core geometric types shared by every pipeline stage.
//!
//! Conventions, fixed once here: right-handed frames, camera +z forward,
//! +x right, +y down; rotations stored as 3x3 matrices, never quaternions;
//! twists follow the SE(3) exponential map with translation applied through
//! the left Jacobian, so `se3_exp` / `se3_log` are exact inverses away from
//! the pi-rotation singularity.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Angle below which exp/log switch to their series expansions (radians).
pub const SMALL_ANGLE: f64 = 1e-9;
/// Orthonormality tolerance enforced on every rotation accepted from outside.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point/label length mismatch: {points} points vs {labels} labels")]
    LengthMismatch { points: usize, labels: usize },
    #[error("non-finite coordinate at point index {index}")]
    NonFinitePoint { index: usize },
    #[error("invalid rotation: {detail}")]
    InvalidRotation { detail: String },
    #[error("invalid homogeneous matrix: bottom row must be [0, 0, 0, 1]")]
    InvalidBottomRow,
    #[error("invalid intrinsics: {field} {detail}")]
    InvalidIntrinsics {
        field: &'static str,
        detail: String,
    },
    #[error("unknown point label code {code} (expected 0..=3)")]
    UnknownLabel { code: u8 },
}

/// Semantic class of a point or pixel. Codes are part of the file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PointLabel {
    Background = 0,
    Trunk = 1,
    Branch = 2,
    Clutter = 3,
}

impl PointLabel {
    pub const ALL: [PointLabel; 4] = [
        PointLabel::Background,
        PointLabel::Trunk,
        PointLabel::Branch,
        PointLabel::Clutter,
    ];

    pub fn from_code(code: u8) -> Result<Self, GeometryError> {
        match code {
            0 => Ok(PointLabel::Background),
            1 => Ok(PointLabel::Trunk),
            2 => Ok(PointLabel::Branch),
            3 => Ok(PointLabel::Clutter),
            code => Err(GeometryError::UnknownLabel { code }),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// A point cloud with one semantic label per point.
///
/// The two vectors always have equal length and every coordinate is finite;
/// both are enforced at construction and on push.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    points: Vec<Vec3>,
    labels: Vec<PointLabel>,
    pub frame_id: Option<String>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Vec3>, labels: Vec<PointLabel>) -> Result<Self, GeometryError> {
        if points.len() != labels.len() {
            return Err(GeometryError::LengthMismatch {
                points: points.len(),
                labels: labels.len(),
            });
        }
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeometryError::NonFinitePoint { index });
            }
        }
        Ok(Self {
            points,
            labels,
            frame_id: None,
        })
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            labels: Vec::new(),
            frame_id: None,
        }
    }

    pub fn push(&mut self, point: Vec3, label: PointLabel) -> Result<(), GeometryError> {
        if !(point.x.is_finite() && point.y.is_finite() && point.z.is_finite()) {
            return Err(GeometryError::NonFinitePoint {
                index: self.points.len(),
            });
        }
        self.points.push(point);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn labels(&self) -> &[PointLabel] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec3, PointLabel)> {
        self.points.iter().zip(self.labels.iter().copied())
    }

    /// Sub-cloud of the points whose label passes `keep`, order preserved.
    pub fn filter_labels(&self, keep: impl Fn(PointLabel) -> bool) -> Self {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (p, l) in self.iter() {
            if keep(l) {
                points.push(*p);
                labels.push(l);
            }
        }
        Self {
            points,
            labels,
            frame_id: self.frame_id.clone(),
        }
    }

    pub fn label_count(&self, label: PointLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Axis-aligned bounds, or None for an empty cloud.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.points.first()?;
        let mut lo = *first;
        let mut hi = *first;
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some((lo, hi))
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Vec<PointLabel>) {
        (self.points, self.labels)
    }
}

/// Rigid body motion: rotation then translation, `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates orthonormality (within [`ROTATION_TOL`]) and det = +1.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if rotation.iter().any(|v| !v.is_finite())
            || translation.iter().any(|v| !v.is_finite())
        {
            return Err(GeometryError::InvalidRotation {
                detail: "non-finite entries".to_string(),
            });
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if deviation > ROTATION_TOL * 10.0 {
            return Err(GeometryError::InvalidRotation {
                detail: format!("R^T R deviates from identity by {deviation:.3e}"),
            });
        }
        if rotation.determinant() < 0.0 {
            return Err(GeometryError::InvalidRotation {
                detail: "determinant is negative (reflection)".to_string(),
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Construction for internally generated rotations that are orthonormal
    /// by construction (exponential map, products of rotations).
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Projects the rotation back onto SO(3) (nearest rotation in Frobenius
    /// norm, via polar decomposition). Call after long composition chains to
    /// stop round-off drift from accumulating.
    pub fn renormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd of finite 3x3 always yields u");
        let v_t = svd.v_t.expect("svd of finite 3x3 always yields v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // Flip the axis paired with the smallest singular value.
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        RigidTransform {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Row-major 4x4 homogeneous matrix, the interchange layout used by
    /// manifests and CLI transform files.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self, GeometryError> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(GeometryError::InvalidBottomRow);
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Self::from_parts(rotation, translation)
    }
}

// On the wire a transform is its row-major 4x4 matrix; deserialization runs
// the same validation as `from_row_major`.
impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let m = <[f64; 16]>::deserialize(deserializer)?;
        RigidTransform::from_row_major(&m).map_err(serde::de::Error::custom)
    }
}

/// Element of se(3): rotational part `omega` (axis * angle, radians) and
/// translational part `v` (meters, pre left-Jacobian).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self {
            omega: Vec3::zeros(),
            v: Vec3::zeros(),
        }
    }
}

/// Skew-symmetric cross-product matrix: `hat(w) * p == w.cross(&p)`.
pub fn hat(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map se(3) -> SE(3).
///
/// `R = I + A hat(w) + B hat(w)^2`, `t = V v` with the left Jacobian
/// `V = I + B hat(w) + C hat(w)^2`; the series branch engages below
/// [`SMALL_ANGLE`] where the closed forms lose precision.
pub fn se3_exp(twist: &Twist) -> RigidTransform {
    let w = twist.omega;
    let theta = w.norm();
    let wx = hat(&w);
    let wx2 = wx * wx;
    let (rotation, v_mat) = if theta < SMALL_ANGLE {
        let r = Matrix3::identity() + wx + wx2 * 0.5;
        let v = Matrix3::identity() + wx * 0.5 + wx2 * (1.0 / 6.0);
        (r, v)
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        let c = (1.0 - a) / t2;
        let r = Matrix3::identity() + wx * a + wx2 * b;
        let v = Matrix3::identity() + wx * b + wx2 * c;
        (r, v)
    };
    RigidTransform::from_parts_unchecked(rotation, v_mat * twist.v)
}

/// Logarithm map SE(3) -> se(3), inverse of [`se3_exp`].
///
/// Exact on [0, pi); at exactly pi the rotation axis sign is inherently
/// ambiguous and one valid representative is returned.
pub fn se3_log(transform: &RigidTransform) -> Twist {
    let r = transform.rotation();
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    // vee(R - R^T) = 2 sin(theta) * axis
    let skew = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );

    let omega = if theta < SMALL_ANGLE {
        skew * 0.5
    } else if theta > std::f64::consts::PI - 1e-6 {
        // Near pi the skew part vanishes; recover the axis from the
        // symmetric part via nn^T = I + (S - I) / (1 - cos theta), anchoring
        // the signs on the largest diagonal entry (always >= 1/3).
        let d = 1.0 - cos_theta;
        let s = (r + r.transpose()) * 0.5;
        let xx = (s[(0, 0)] - cos_theta) / d;
        let yy = (s[(1, 1)] - cos_theta) / d;
        let zz = (s[(2, 2)] - cos_theta) / d;
        let xy = s[(0, 1)] / d;
        let xz = s[(0, 2)] / d;
        let yz = s[(1, 2)] / d;
        let mut n = if xx >= yy && xx >= zz {
            let x = xx.max(0.0).sqrt();
            Vec3::new(x, xy / x, xz / x)
        } else if yy >= zz {
            let y = yy.max(0.0).sqrt();
            Vec3::new(xy / y, y, yz / y)
        } else {
            let z = zz.max(0.0).sqrt();
            Vec3::new(xz / z, yz / z, z)
        };
        let norm = n.norm();
        if norm > 0.0 {
            n /= norm;
        }
        if skew.dot(&n) < 0.0 {
            n = -n;
        }
        n * theta
    } else {
        skew * (theta / (2.0 * theta.sin()))
    };

    let wx = hat(&omega);
    let wx2 = wx * wx;
    let v_inv = if theta < SMALL_ANGLE {
        Matrix3::identity() - wx * 0.5 + wx2 * (1.0 / 12.0)
    } else {
        let coeff = (1.0 / (theta * theta))
            - (1.0 + cos_theta) / (2.0 * theta * theta.sin());
        Matrix3::identity() - wx * 0.5 + wx2 * coeff
    };
    Twist {
        omega,
        v: v_inv * transform.translation(),
    }
}

/// Applies `transform` to every point, preserving labels and order.
pub fn apply_transform(cloud: &LabeledPointCloud, transform: &RigidTransform) -> LabeledPointCloud {
    let points = cloud.points().iter().map(|p| transform.apply(p)).collect();
    LabeledPointCloud {
        points,
        labels: cloud.labels().to_vec(),
        frame_id: cloud.frame_id.clone(),
    }
}

/// Pinhole camera model. `depth_scale` converts stored integer depth samples
/// to meters (e.g. 0.001 for millimeter samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        depth_scale: f64,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            depth_scale,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        fn positive(field: &'static str, v: f64) -> Result<(), GeometryError> {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeometryError::InvalidIntrinsics {
                    field,
                    detail: format!("must be positive and finite, got {v}"),
                });
            }
            Ok(())
        }
        if self.width == 0 {
            return Err(GeometryError::InvalidIntrinsics {
                field: "width",
                detail: "must be nonzero".to_string(),
            });
        }
        if self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics {
                field: "height",
                detail: "must be nonzero".to_string(),
            });
        }
        positive("fx", self.fx)?;
        positive("fy", self.fy)?;
        positive("depth_scale", self.depth_scale)?;
        if !self.cx.is_finite() || self.cx < 0.0 || self.cx >= self.width as f64 {
            return Err(GeometryError::InvalidIntrinsics {
                field: "cx",
                detail: format!("principal point outside image, got {}", self.cx),
            });
        }
        if !self.cy.is_finite() || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(GeometryError::InvalidIntrinsics {
                field: "cy",
                detail: format!("principal point outside image, got {}", self.cy),
            });
        }
        Ok(())
    }

    /// Back-projects pixel (u, v) with metric depth z to a camera-frame point.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Projects a camera-frame point to pixel coordinates; None behind camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((p.x * self.fx / p.z + self.cx, p.y * self.fy / p.z + self.cy))
    }
}
