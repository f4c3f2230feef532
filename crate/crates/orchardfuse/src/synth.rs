//! Procedural ground-truth trees.
//!
//! Generates parametric trellis-style trees as labeled point clouds with
//! exactly known geometry, renders analytic depth/mask frames of them from
//! arbitrary camera poses, and derives leaf-season variants where most
//! branches vanish, the trunk is partially occluded, and foliage clutter
//! appears. Every operation is a deterministic function of its inputs and
//! an explicit seed, which is what makes these clouds usable as oracles:
//! the generator hands back the measurements a perfect instrument would
//! read off the same geometry.

use crate::geometry::{CameraIntrinsics, LabeledPointCloud, PointLabel, RigidTransform, Vec3};
use crate::ingest::{DepthImage, MaskImage};
use crate::measurement::{
    cluster_branches, estimate_trunk_axis, TrunkAxis, DEFAULT_LINK_RADIUS_M, TWO_INCH_OFFSET_M,
};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid tree spec field {field}: {detail}")]
    BadSpec { field: &'static str, detail: String },
    #[error("invalid parameter {name}: {detail}")]
    BadParam { name: &'static str, detail: String },
    #[error("camera at ({x:.3}, {y:.3}, {z:.3}) is inside the tree geometry")]
    CameraInsideGeometry { x: f64, y: f64, z: f64 },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Parametric description of one synthetic tree.
///
/// The trunk is a tapered cylinder up the +z axis from the origin. Branches
/// leave the trunk at the listed stations, alternating between the +x and
/// -x side of the trellis plane, tilted up by the common pitch angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSpec {
    pub trunk_height_m: f64,
    pub trunk_diameter_base_mm: f64,
    /// Diameter ratio top/base, in (0, 1].
    pub taper: f64,
    pub branch_count: usize,
    /// Attachment heights along the trunk, strictly increasing.
    pub branch_stations_m: Vec<f64>,
    pub branch_diameters_mm: Vec<f64>,
    pub branch_lengths_m: Vec<f64>,
    /// Upward tilt of every branch from horizontal.
    pub branch_pitch_deg: f64,
    /// Gaussian radial surface noise.
    pub noise_sigma_mm: f64,
    pub seed: u64,
    /// Surface sampling density for generated clouds.
    pub points_per_m2: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            trunk_height_m: 2.2,
            trunk_diameter_base_mm: 90.0,
            taper: 0.7,
            branch_count: 6,
            branch_stations_m: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
            branch_diameters_mm: vec![25.0; 6],
            branch_lengths_m: vec![0.5; 6],
            branch_pitch_deg: 15.0,
            noise_sigma_mm: 1.0,
            seed: 7,
            points_per_m2: 40_000.0,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field: &'static str, detail: String| Err(SynthError::BadSpec { field, detail });
        if !(self.trunk_height_m > 0.0 && self.trunk_height_m.is_finite()) {
            return bad("trunk_height_m", format!("must be positive, got {}", self.trunk_height_m));
        }
        if !(self.trunk_diameter_base_mm > 0.0 && self.trunk_diameter_base_mm.is_finite()) {
            return bad(
                "trunk_diameter_base_mm",
                format!("must be positive, got {}", self.trunk_diameter_base_mm),
            );
        }
        if !(self.taper > 0.0 && self.taper <= 1.0) {
            return bad("taper", format!("must be in (0, 1], got {}", self.taper));
        }
        if self.branch_stations_m.len() != self.branch_count {
            return bad(
                "branch_stations_m",
                format!(
                    "{} stations for branch_count {}",
                    self.branch_stations_m.len(),
                    self.branch_count
                ),
            );
        }
        if self.branch_diameters_mm.len() != self.branch_count {
            return bad(
                "branch_diameters_mm",
                format!(
                    "{} diameters for branch_count {}",
                    self.branch_diameters_mm.len(),
                    self.branch_count
                ),
            );
        }
        if self.branch_lengths_m.len() != self.branch_count {
            return bad(
                "branch_lengths_m",
                format!(
                    "{} lengths for branch_count {}",
                    self.branch_lengths_m.len(),
                    self.branch_count
                ),
            );
        }
        for w in self.branch_stations_m.windows(2) {
            if !(w[1] > w[0]) {
                return bad(
                    "branch_stations_m",
                    format!("must be strictly increasing, got {} then {}", w[0], w[1]),
                );
            }
        }
        for &s in &self.branch_stations_m {
            if !(s > 0.0 && s < self.trunk_height_m) {
                return bad(
                    "branch_stations_m",
                    format!("station {s} outside (0, {})", self.trunk_height_m),
                );
            }
        }
        for &d in &self.branch_diameters_mm {
            if !(d > 0.0 && d.is_finite()) {
                return bad("branch_diameters_mm", format!("must be positive, got {d}"));
            }
        }
        for &l in &self.branch_lengths_m {
            if !(l > 0.0 && l.is_finite()) {
                return bad("branch_lengths_m", format!("must be positive, got {l}"));
            }
        }
        if !(self.branch_pitch_deg.abs() < 89.0) {
            return bad(
                "branch_pitch_deg",
                format!("must be within (-89, 89), got {}", self.branch_pitch_deg),
            );
        }
        if !(self.noise_sigma_mm >= 0.0 && self.noise_sigma_mm.is_finite()) {
            return bad(
                "noise_sigma_mm",
                format!("must be non-negative, got {}", self.noise_sigma_mm),
            );
        }
        if !(self.points_per_m2 > 0.0 && self.points_per_m2.is_finite()) {
            return bad(
                "points_per_m2",
                format!("must be positive, got {}", self.points_per_m2),
            );
        }
        Ok(())
    }
}

/// What a perfect instrument would measure on the generated tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Trunk stations at 25/50/75% of trunk height.
    pub trunk_stations_m: Vec<f64>,
    /// True trunk diameter at each of those stations.
    pub trunk_diameters_mm: Vec<f64>,
    /// True branch diameters, in attachment-station order.
    pub branch_diameters_mm: Vec<f64>,
    /// Generated branch point nearest the trunk axis, per branch.
    pub branch_attachments: Vec<[f64; 3]>,
    /// True branch direction, per branch.
    pub branch_directions: Vec<[f64; 3]>,
    /// Distance between the two-inch offset points of station-adjacent
    /// branches.
    pub spacings_mm: Vec<f64>,
    pub applied_transform: RigidTransform,
}

struct TrunkFrustum {
    base_radius: f64,
    top_radius: f64,
    height: f64,
}

impl TrunkFrustum {
    fn radius_at(&self, z: f64) -> f64 {
        self.base_radius + (self.top_radius - self.base_radius) * z / self.height
    }

    fn slope(&self) -> f64 {
        (self.top_radius - self.base_radius) / self.height
    }
}

struct BranchCylinder {
    /// Centerline start, on the trunk surface.
    base: Vec3,
    dir: Vec3,
    radius: f64,
    length: f64,
}

struct TreeModel {
    trunk: TrunkFrustum,
    branches: Vec<BranchCylinder>,
}

fn build_model(spec: &TreeSpec) -> TreeModel {
    let base_radius = spec.trunk_diameter_base_mm / 2000.0;
    let trunk = TrunkFrustum {
        base_radius,
        top_radius: base_radius * spec.taper,
        height: spec.trunk_height_m,
    };
    let pitch = spec.branch_pitch_deg.to_radians();
    let branches = (0..spec.branch_count)
        .map(|i| {
            let azimuth = if i % 2 == 0 { 0.0 } else { std::f64::consts::PI };
            let dir = Vec3::new(
                azimuth.cos() * pitch.cos(),
                azimuth.sin() * pitch.cos(),
                pitch.sin(),
            );
            let station = spec.branch_stations_m[i];
            // Start the centerline where it pierces the trunk surface.
            let t_start = trunk.radius_at(station) / pitch.cos();
            BranchCylinder {
                base: Vec3::new(0.0, 0.0, station) + dir * t_start,
                dir,
                radius: spec.branch_diameters_mm[i] / 2000.0,
                length: spec.branch_lengths_m[i],
            }
        })
        .collect();
    TreeModel { trunk, branches }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Orthonormal in-plane basis perpendicular to a unit `dir`.
fn frame_perp(dir: &Vec3) -> (Vec3, Vec3) {
    let pick = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = dir.cross(&pick).normalize();
    let e2 = dir.cross(&e1);
    (e1, e2)
}

/// Sample a labeled cloud of the tree surface plus its ground truth.
///
/// The trunk is sampled uniformly over its lateral surface (rejection
/// sampling proportional to the local radius), branches uniformly over
/// theirs; radial Gaussian noise of `noise_sigma_mm` is added around each
/// surface. Identical specs (including seed) give bit-identical output.
pub fn generate_tree(spec: &TreeSpec) -> Result<(LabeledPointCloud, GroundTruth), SynthError> {
    spec.validate()?;
    let model = build_model(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.noise_sigma_mm / 1000.0;

    let trunk = &model.trunk;
    let slant = (trunk.height.powi(2) + (trunk.base_radius - trunk.top_radius).powi(2)).sqrt();
    let trunk_area = std::f64::consts::PI * (trunk.base_radius + trunk.top_radius) * slant;
    let n_trunk = (spec.points_per_m2 * trunk_area).round() as usize;
    let r_max = trunk.base_radius.max(trunk.top_radius);

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n_trunk {
        let z = loop {
            let z = rng.gen_range(0.0..trunk.height);
            if rng.gen::<f64>() < trunk.radius_at(z) / r_max {
                break z;
            }
        };
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = trunk.radius_at(z) + sigma * gauss(&mut rng);
        points.push(Vec3::new(r * theta.cos(), r * theta.sin(), z));
        labels.push(PointLabel::Trunk);
    }

    let mut branch_ranges = Vec::with_capacity(model.branches.len());
    for b in &model.branches {
        let n = (spec.points_per_m2 * std::f64::consts::TAU * b.radius * b.length).round() as usize;
        let (e1, e2) = frame_perp(&b.dir);
        let start = points.len();
        for _ in 0..n {
            let t = rng.gen_range(0.0..b.length);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = b.radius + sigma * gauss(&mut rng);
            points.push(b.base + b.dir * t + (e1 * theta.cos() + e2 * theta.sin()) * r);
            labels.push(PointLabel::Branch);
        }
        branch_ranges.push(start..points.len());
    }

    // Ground truth straight off the generating geometry. Attachments use
    // the emitted points so they mean the same thing the measurement
    // module's attachment does.
    let trunk_stations_m: Vec<f64> = [0.25, 0.50, 0.75]
        .iter()
        .map(|f| f * trunk.height)
        .collect();
    let trunk_diameters_mm = trunk_stations_m
        .iter()
        .map(|&s| 2000.0 * trunk.radius_at(s))
        .collect();
    let mut per_branch: Vec<(Vec3, Vec3, f64)> = Vec::new(); // attachment, dir, diameter
    for (i, range) in branch_ranges.iter().enumerate() {
        let b = &model.branches[i];
        // Attachment is the emitted point nearest the trunk axis; an
        // unsampled branch falls back to its centerline exit point.
        let mut attachment = b.base;
        let mut best = f64::INFINITY;
        for p in &points[range.clone()] {
            let d = p.x * p.x + p.y * p.y;
            if d < best {
                best = d;
                attachment = *p;
            }
        }
        per_branch.push((attachment, b.dir, 2000.0 * b.radius));
    }
    per_branch.sort_by(|a, b| a.0.z.total_cmp(&b.0.z));
    let spacings_mm = per_branch
        .windows(2)
        .map(|w| {
            let off_a = w[0].0 + w[0].1 * TWO_INCH_OFFSET_M;
            let off_b = w[1].0 + w[1].1 * TWO_INCH_OFFSET_M;
            (off_b - off_a).norm() * 1000.0
        })
        .collect();
    let truth = GroundTruth {
        trunk_stations_m,
        trunk_diameters_mm,
        branch_diameters_mm: per_branch.iter().map(|b| b.2).collect(),
        branch_attachments: per_branch.iter().map(|b| [b.0.x, b.0.y, b.0.z]).collect(),
        branch_directions: per_branch.iter().map(|b| [b.1.x, b.1.y, b.1.z]).collect(),
        spacings_mm,
        applied_transform: RigidTransform::identity(),
    };
    let cloud = LabeledPointCloud::new(points, labels).expect("generated points are finite");
    Ok((cloud, truth))
}

const RAY_EPS: f64 = 1e-9;

/// Nearest intersection of a ray with the tapered trunk, within its height.
fn hit_trunk(trunk: &TrunkFrustum, o: &Vec3, d: &Vec3) -> Option<f64> {
    let b_slope = trunk.slope();
    let r0 = trunk.base_radius;
    let a = d.x * d.x + d.y * d.y - b_slope * b_slope * d.z * d.z;
    let rb = r0 + b_slope * o.z;
    let b = 2.0 * (o.x * d.x + o.y * d.y - b_slope * d.z * rb);
    let c = o.x * o.x + o.y * o.y - rb * rb;
    // Both roots matter: the nearer may exit the height range.
    let candidates = roots(a, b, c);
    candidates
        .into_iter()
        .flatten()
        .filter(|&t| t > RAY_EPS)
        .filter(|&t| {
            let z = o.z + t * d.z;
            (0.0..=trunk.height).contains(&z)
        })
        .fold(None, |best: Option<f64>, t| {
            Some(best.map_or(t, |b| b.min(t)))
        })
}

/// Nearest intersection of a ray with a finite open cylinder.
fn hit_cylinder(cyl: &BranchCylinder, o: &Vec3, d: &Vec3) -> Option<f64> {
    let m = o - cyl.base;
    let md = m.dot(&cyl.dir);
    let dd = d.dot(&cyl.dir);
    let mp = m - cyl.dir * md;
    let dp = d - cyl.dir * dd;
    let a = dp.dot(&dp);
    let b = 2.0 * mp.dot(&dp);
    let c = mp.dot(&mp) - cyl.radius * cyl.radius;
    roots(a, b, c)
        .into_iter()
        .flatten()
        .filter(|&t| t > RAY_EPS)
        .filter(|&t| {
            let s = md + t * dd;
            (0.0..=cyl.length).contains(&s)
        })
        .fold(None, |best: Option<f64>, t| {
            Some(best.map_or(t, |b| b.min(t)))
        })
}

fn roots(a: f64, b: f64, c: f64) -> [Option<f64>; 2] {
    if a.abs() < 1e-15 {
        if b.abs() < 1e-15 {
            return [None, None];
        }
        return [Some(-c / b), None];
    }
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return [None, None];
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let t0 = q / a;
    let t1 = if q.abs() > 0.0 { c / q } else { t0 };
    [Some(t0), Some(t1)]
}

fn camera_inside(model: &TreeModel, eye: &Vec3) -> bool {
    let margin = 0.01;
    if (0.0..=model.trunk.height).contains(&eye.z) {
        let rho = (eye.x * eye.x + eye.y * eye.y).sqrt();
        if rho < model.trunk.radius_at(eye.z) + margin {
            return true;
        }
    }
    for b in &model.branches {
        let m = eye - b.base;
        let s = m.dot(&b.dir);
        if (0.0..=b.length).contains(&s) && (m - b.dir * s).norm() < b.radius + margin {
            return true;
        }
    }
    false
}

/// Render one analytic depth + mask frame of the tree.
///
/// Each pixel's ray is intersected with the trunk frustum and every branch
/// cylinder; the nearest hit writes its camera-space depth (quantized by
/// `depth_scale` into the 16-bit image) and the primitive's class into the
/// mask. Misses stay depth 0, background. The camera must be outside the
/// tree geometry. Rendering uses the exact surfaces, never the sampled
/// noise, so renders are oracles for reconstruction error.
pub fn render_depth_frame(
    spec: &TreeSpec,
    pose: &RigidTransform,
    intrinsics: &CameraIntrinsics,
) -> Result<(DepthImage, MaskImage), SynthError> {
    spec.validate()?;
    intrinsics.validate()?;
    let model = build_model(spec);
    let eye = *pose.translation();
    if camera_inside(&model, &eye) {
        return Err(SynthError::CameraInsideGeometry {
            x: eye.x,
            y: eye.y,
            z: eye.z,
        });
    }
    let mut depth = DepthImage::zeros(intrinsics.width, intrinsics.height);
    let mut mask = MaskImage::background(intrinsics.width, intrinsics.height);
    for v in 0..intrinsics.height {
        for u in 0..intrinsics.width {
            // Unnormalized direction with unit camera z, so the ray
            // parameter is the camera-space depth directly.
            let dir_c = Vec3::new(
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let d = pose.rotation() * dir_c;
            let mut best: Option<(f64, u8)> = None;
            if let Some(t) = hit_trunk(&model.trunk, &eye, &d) {
                best = Some((t, PointLabel::Trunk.code()));
            }
            for cyl in &model.branches {
                if let Some(t) = hit_cylinder(cyl, &eye, &d) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, PointLabel::Branch.code()));
                    }
                }
            }
            if let Some((t, code)) = best {
                let sample = (t / intrinsics.depth_scale).round();
                if sample >= 1.0 && sample <= u16::MAX as f64 {
                    depth.set(u, v, sample as u16);
                    mask.set(u, v, code);
                }
            }
        }
    }
    Ok((depth, mask))
}

/// Camera-to-world pose looking from `eye` toward `target`, image +y
/// pointing down in world z.
pub fn look_at_pose(eye: Vec3, target: Vec3) -> Result<RigidTransform, SynthError> {
    let view = target - eye;
    if view.norm() < 1e-12 {
        return Err(SynthError::BadParam {
            name: "look_at",
            detail: "eye and target coincide".into(),
        });
    }
    let z_c = view.normalize();
    let mut x_c = Vec3::new(0.0, 0.0, -1.0).cross(&z_c);
    if x_c.norm() < 1e-9 {
        // Looking straight up or down; any horizontal right vector works.
        x_c = Vec3::x();
    }
    let x_c = x_c.normalize();
    let y_c = z_c.cross(&x_c);
    let r = Matrix3::from_columns(&[x_c, y_c, z_c]);
    Ok(RigidTransform::from_parts(r, eye)?)
}

/// `count` camera poses on a horizontal ring of `radius` around
/// `(center.x, center.y)` at height `height`, all looking at `center`.
pub fn orbit_poses(
    center: Vec3,
    radius: f64,
    height: f64,
    count: usize,
) -> Result<Vec<RigidTransform>, SynthError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SynthError::BadParam {
            name: "radius",
            detail: format!("must be positive, got {radius}"),
        });
    }
    if count == 0 {
        return Err(SynthError::BadParam {
            name: "count",
            detail: "need at least one pose".into(),
        });
    }
    (0..count)
        .map(|i| {
            let ang = i as f64 / count as f64 * std::f64::consts::TAU;
            let eye = Vec3::new(
                center.x + radius * ang.cos(),
                center.y + radius * ang.sin(),
                height,
            );
            look_at_pose(eye, center)
        })
        .collect()
}

/// Derive a leaf-season variant of a generated tree cloud.
///
/// Keeps `keep_branch_frac` of the branch clusters (whole clusters, chosen
/// at random), carves three random angular sectors out of the trunk (one
/// per height band, each removing 20 to 40% of that band's surface), and
/// sprinkles `clutter_density` Clutter points per cubic meter through the
/// upper 70% of the cloud's bounding box. Deterministic under `seed`.
pub fn make_canopy_variant(
    cloud: &LabeledPointCloud,
    keep_branch_frac: f64,
    clutter_density: f64,
    seed: u64,
) -> Result<LabeledPointCloud, SynthError> {
    if !(0.0..=1.0).contains(&keep_branch_frac) {
        return Err(SynthError::BadParam {
            name: "keep_branch_frac",
            detail: format!("must be in [0, 1], got {keep_branch_frac}"),
        });
    }
    if !(clutter_density >= 0.0 && clutter_density.is_finite()) {
        return Err(SynthError::BadParam {
            name: "clutter_density",
            detail: format!("must be non-negative, got {clutter_density}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Trunk axis for banding and azimuths; fall back to vertical when the
    // cloud cannot support an estimate.
    let axis = estimate_trunk_axis(cloud).unwrap_or(TrunkAxis {
        point: [0.0, 0.0, 0.0],
        dir: [0.0, 0.0, 1.0],
    });
    let dir = axis.dir_v();
    let (e1, e2) = frame_perp(&dir);

    let trunk_stations: Vec<f64> = cloud
        .iter()
        .filter(|(_, l)| *l == PointLabel::Trunk)
        .map(|(p, _)| axis.station_of(p))
        .collect();
    let (s_lo, s_hi) = trunk_stations
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });

    // One occluded angular sector per height band.
    let bands = 3;
    let sectors: Vec<(f64, f64)> = (0..bands)
        .map(|_| {
            let frac = rng.gen_range(0.2..0.4);
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            (start, frac * std::f64::consts::TAU)
        })
        .collect();
    let occluded = |p: &Vec3| -> bool {
        if !s_lo.is_finite() {
            return false;
        }
        let s = axis.station_of(p);
        let band = if s_hi > s_lo {
            (((s - s_lo) / (s_hi - s_lo) * bands as f64) as usize).min(bands - 1)
        } else {
            0
        };
        let rel = p - axis.point_v();
        let angle = rel.dot(&e2).atan2(rel.dot(&e1)).rem_euclid(std::f64::consts::TAU);
        let (start, width) = sectors[band];
        (angle - start).rem_euclid(std::f64::consts::TAU) < width
    };

    // Whole-cluster branch survival: every branch point belongs to exactly
    // one single-linkage cluster (min size 1), and clusters live or die
    // together.
    let clusters = cluster_branches(cloud, &axis, DEFAULT_LINK_RADIUS_M, 1);
    let keep_count = (keep_branch_frac * clusters.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    for i in 0..order.len() {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let kept: std::collections::HashSet<usize> = order.into_iter().take(keep_count).collect();
    let mut kept_branch_points: std::collections::HashSet<[u64; 3]> = std::collections::HashSet::new();
    for (ci, cluster) in clusters.iter().enumerate() {
        if kept.contains(&ci) {
            for p in cluster.points.points() {
                kept_branch_points.insert([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]);
            }
        }
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (p, l) in cloud.iter() {
        let keep = match l {
            PointLabel::Trunk => !occluded(p),
            PointLabel::Branch => {
                kept_branch_points.contains(&[p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            }
            PointLabel::Clutter | PointLabel::Background => true,
        };
        if keep {
            points.push(*p);
            labels.push(l);
        }
    }

    if clutter_density > 0.0 {
        if let Some((lo, hi)) = cloud.bounds() {
            let z0 = lo.z + 0.3 * (hi.z - lo.z);
            let extent = Vec3::new(hi.x - lo.x, hi.y - lo.y, hi.z - z0);
            let volume = extent.x * extent.y * extent.z;
            if volume > 0.0 {
                let n = (clutter_density * volume).round() as usize;
                for _ in 0..n {
                    points.push(Vec3::new(
                        rng.gen_range(lo.x..hi.x),
                        rng.gen_range(lo.y..hi.y),
                        rng.gen_range(z0..hi.z),
                    ));
                    labels.push(PointLabel::Clutter);
                }
            }
        }
    }

    Ok(LabeledPointCloud::new(points, labels).expect("variant points are finite"))
}
