//! Structural measurements from a labeled reconstruction.
//!
//! Mirrors the manual caliper-and-tape workflow on a fused cloud: estimate
//! the trunk axis, fit circles to thin slabs of trunk and branch points to
//! get diameters, cluster branch points into individual branches, and
//! report the spacing between neighbouring branches. Everything internal is
//! meters; reported diameters and spacings are millimeters, with the unit
//! in the field name.

use crate::geometry::{LabeledPointCloud, PointLabel, Vec3};
use crate::spatial::KdTree;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trunk-axis estimation needs at least this many Trunk points.
pub const MIN_TRUNK_POINTS: usize = 100;
/// The dominant scatter eigenvalue must exceed the second by this factor
/// for the axis to be considered unambiguous.
pub const AXIS_EIGEN_RATIO: f64 = 2.0;
/// A slab circle fit needs at least this many points.
pub const MIN_SLAB_POINTS: usize = 12;
/// ... spanning at least this much arc around the axis, in degrees.
pub const MIN_ARC_DEG: f64 = 120.0;
/// Branch diameters are taken two inches out from the attachment point.
pub const TWO_INCH_OFFSET_M: f64 = 0.0508;
/// Default single-linkage radius for branch clustering.
pub const DEFAULT_LINK_RADIUS_M: f64 = 0.015;
/// Clusters smaller than this are not branches.
pub const DEFAULT_MIN_CLUSTER_POINTS: usize = 30;
/// Branch direction is estimated from cluster points within this distance
/// of the attachment.
pub const LOCAL_DIR_RADIUS_M: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("bad measurement config: {detail}")]
    BadConfig { detail: String },
    #[error("only {have} trunk-labeled points, need {need} to estimate an axis")]
    TooFewTrunkPoints { have: usize, need: usize },
    #[error(
        "trunk axis is ambiguous: dominant/second eigenvalue ratio {ratio:.3} is below {}",
        AXIS_EIGEN_RATIO
    )]
    AmbiguousAxis { ratio: f64 },
    #[error(
        "slab at station {station_m:.3} m holds {have} {label:?} points, need {need}"
    )]
    InsufficientSlabPoints {
        label: PointLabel,
        station_m: f64,
        have: usize,
        need: usize,
    },
    #[error(
        "slab at station {station_m:.3} m covers only {coverage_deg:.1} deg of arc, need {}",
        MIN_ARC_DEG
    )]
    UnreliableArc { station_m: f64, coverage_deg: f64 },
    #[error("slab at station {station_m:.3} m has no circular structure (degenerate fit)")]
    DegenerateCircle { station_m: f64 },
    #[error("no trunk station produced a usable circle fit: {detail}")]
    TrunkFitFailed { detail: String },
}

/// Trunk axis as a point on the axis plus a unit direction with positive
/// vertical (z) component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrunkAxis {
    pub point: [f64; 3],
    pub dir: [f64; 3],
}

impl TrunkAxis {
    pub fn point_v(&self) -> Vec3 {
        Vec3::new(self.point[0], self.point[1], self.point[2])
    }

    pub fn dir_v(&self) -> Vec3 {
        Vec3::new(self.dir[0], self.dir[1], self.dir[2])
    }

    /// Signed coordinate of `p` along the axis, relative to `point`.
    pub fn station_of(&self, p: &Vec3) -> f64 {
        (p - self.point_v()).dot(&self.dir_v())
    }

    /// Distance from `p` to the (infinite) axis line.
    pub fn radial_distance(&self, p: &Vec3) -> f64 {
        let rel = p - self.point_v();
        (rel - self.dir_v() * rel.dot(&self.dir_v())).norm()
    }
}

/// One connected cluster of Branch-labeled points.
#[derive(Debug, Clone)]
pub struct BranchInstance {
    /// Index in trunk-station order, 0 at the lowest attachment.
    pub id: u32,
    pub points: LabeledPointCloud,
    /// Cluster point closest to the trunk axis.
    pub attachment: Vec3,
    /// Unit direction of the branch near its attachment, pointing away
    /// from the trunk axis.
    pub axis_dir: Vec3,
    /// Attachment position along the trunk axis.
    pub station_m: f64,
}

/// Result of one slab circle fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircleFit {
    pub diameter_mm: f64,
    /// RMS radial misfit of the slab points against the fitted circle.
    pub residual_mm: f64,
    pub point_count: usize,
    pub arc_coverage_deg: f64,
}

/// How the distance between adjacent branches is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpacingMode {
    /// Euclidean distance between the two-inch offset points, like running
    /// a tape between the marks where the diameters were taken.
    OffsetPoints,
    /// Absolute difference of attachment stations along the trunk axis.
    StationDifference,
}

impl std::str::FromStr for SpacingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "offset_points" | "offset-points" => Ok(SpacingMode::OffsetPoints),
            "station_difference" | "station-difference" => Ok(SpacingMode::StationDifference),
            other => Err(format!(
                "unknown spacing mode {other:?}, expected offset_points or station_difference"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    /// Single-linkage radius for branch clustering.
    pub link_radius_m: f64,
    /// Minimum points for a cluster to count as a branch.
    pub min_cluster_points: usize,
    /// Trunk slab stations as fractions of the trunk's axial extent.
    pub trunk_station_fractions: Vec<f64>,
    pub trunk_slab_thickness_m: f64,
    pub branch_slab_thickness_m: f64,
    /// Distance from the attachment at which branch diameter is taken.
    pub branch_offset_m: f64,
    pub spacing_mode: SpacingMode,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            link_radius_m: DEFAULT_LINK_RADIUS_M,
            min_cluster_points: DEFAULT_MIN_CLUSTER_POINTS,
            trunk_station_fractions: vec![0.25, 0.50, 0.75],
            trunk_slab_thickness_m: 0.02,
            branch_slab_thickness_m: 0.015,
            branch_offset_m: TWO_INCH_OFFSET_M,
            spacing_mode: SpacingMode::OffsetPoints,
        }
    }
}

impl MeasurementConfig {
    pub fn validate(&self) -> Result<(), MeasurementError> {
        let bad = |detail: String| Err(MeasurementError::BadConfig { detail });
        let positive = [
            ("link_radius_m", self.link_radius_m),
            ("trunk_slab_thickness_m", self.trunk_slab_thickness_m),
            ("branch_slab_thickness_m", self.branch_slab_thickness_m),
            ("branch_offset_m", self.branch_offset_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.trunk_station_fractions.is_empty() {
            return bad("trunk_station_fractions must not be empty".into());
        }
        for &f in &self.trunk_station_fractions {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("trunk station fraction {f} outside [0, 1]"));
            }
        }
        if self.min_cluster_points == 0 {
            return bad("min_cluster_points must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchDiameter {
    pub id: u32,
    /// Absent when the slab fit failed for this branch.
    pub diameter_mm: Option<f64>,
    pub residual_mm: Option<f64>,
    /// Why the diameter is absent, when it is.
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpacing {
    /// The two adjacent branches, by id, lower station first.
    pub ids: [u32; 2],
    pub spacing_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    /// Median of the successful trunk slab fits.
    pub trunk_diameter_mm: f64,
    /// Heights above the trunk's lower extent where those fits succeeded.
    pub measurement_heights_m: Vec<f64>,
    /// RMS radial misfit of each successful trunk fit, same order.
    pub fit_residuals_mm: Vec<f64>,
    pub branch_count: usize,
    pub branch_diameters_mm: Vec<BranchDiameter>,
    /// One entry per adjacent pair of branches in station order.
    pub branch_spacings_mm: Vec<BranchSpacing>,
}

/// Orthonormal in-plane basis perpendicular to a unit `dir`.
fn orthonormal_frame(dir: &Vec3) -> (Vec3, Vec3) {
    let pick = if dir.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let e1 = dir.cross(&pick).normalize();
    let e2 = dir.cross(&e1);
    (e1, e2)
}

/// Scatter eigenpairs of a point set, eigenvalues descending.
fn scatter_eigen(points: &[Vec3]) -> (Vec3, [f64; 3], [Vec3; 3]) {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    scatter /= n;
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = [
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    ];
    let vectors = [
        Vec3::from(eig.eigenvectors.column(order[0])),
        Vec3::from(eig.eigenvectors.column(order[1])),
        Vec3::from(eig.eigenvectors.column(order[2])),
    ];
    (centroid, values, vectors)
}

/// Make an eigenvector's sign deterministic: positive z, then positive
/// first nonzero component.
fn canonical_sign(v: Vec3) -> Vec3 {
    for c in [v.z, v.x, v.y] {
        if c > 0.0 {
            return v;
        }
        if c < 0.0 {
            return -v;
        }
    }
    v
}

/// Principal axis of the Trunk-labeled points.
///
/// The direction is the dominant eigenvector of the trunk scatter, oriented
/// with positive vertical (z) component; the returned point is the trunk
/// centroid. Fails when there are fewer than [`MIN_TRUNK_POINTS`] trunk
/// points or when the scatter has no clear dominant direction
/// (eigenvalue ratio below [`AXIS_EIGEN_RATIO`]).
pub fn estimate_trunk_axis(cloud: &LabeledPointCloud) -> Result<TrunkAxis, MeasurementError> {
    let trunk: Vec<Vec3> = cloud
        .iter()
        .filter(|(_, l)| *l == PointLabel::Trunk)
        .map(|(p, _)| *p)
        .collect();
    if trunk.len() < MIN_TRUNK_POINTS {
        return Err(MeasurementError::TooFewTrunkPoints {
            have: trunk.len(),
            need: MIN_TRUNK_POINTS,
        });
    }
    let (centroid, values, vectors) = scatter_eigen(&trunk);
    let ratio = values[0] / values[1];
    if !(ratio >= AXIS_EIGEN_RATIO) {
        return Err(MeasurementError::AmbiguousAxis { ratio });
    }
    let dir = canonical_sign(vectors[0]).normalize();
    Ok(TrunkAxis {
        point: [centroid.x, centroid.y, centroid.z],
        dir: [dir.x, dir.y, dir.z],
    })
}

/// Least-squares circle fit to points of one label in a thin slab.
///
/// The slab spans `station ± thickness/2` along `axis.dir`. Points are
/// projected onto the plane perpendicular to the axis and an algebraic
/// (Kasa) circle is fitted in closed form. The fit refuses to run on fewer
/// than [`MIN_SLAB_POINTS`] points or when the points cover less than
/// [`MIN_ARC_DEG`] of arc around the axis, where coverage is 360 degrees
/// minus the largest angular gap between consecutive points.
pub fn fit_circle_slab(
    cloud: &LabeledPointCloud,
    axis: &TrunkAxis,
    station: f64,
    thickness: f64,
    label: PointLabel,
) -> Result<CircleFit, MeasurementError> {
    let point = axis.point_v();
    let dir = axis.dir_v();
    let (e1, e2) = orthonormal_frame(&dir);
    let half = thickness / 2.0;
    let mut planar: Vec<(f64, f64)> = Vec::new();
    for (p, l) in cloud.iter() {
        if l != label {
            continue;
        }
        let rel = p - point;
        if (rel.dot(&dir) - station).abs() > half {
            continue;
        }
        planar.push((rel.dot(&e1), rel.dot(&e2)));
    }
    if planar.len() < MIN_SLAB_POINTS {
        return Err(MeasurementError::InsufficientSlabPoints {
            label,
            station_m: station,
            have: planar.len(),
            need: MIN_SLAB_POINTS,
        });
    }

    let mut angles: Vec<f64> = planar
        .iter()
        .map(|&(a, b)| b.atan2(a).to_degrees())
        .collect();
    angles.sort_by(f64::total_cmp);
    let mut max_gap = angles[0] + 360.0 - angles[angles.len() - 1];
    for w in angles.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    let coverage = 360.0 - max_gap;
    if coverage < MIN_ARC_DEG {
        return Err(MeasurementError::UnreliableArc {
            station_m: station,
            coverage_deg: coverage,
        });
    }

    // Kasa fit: minimize sum of (a^2 + b^2 + D a + E b + F)^2 over D, E, F.
    let mut ata = Matrix3::zeros();
    let mut aty = Vec3::zeros();
    for &(a, b) in &planar {
        let row = Vec3::new(a, b, 1.0);
        let rhs = -(a * a + b * b);
        ata += row * row.transpose();
        aty += row * rhs;
    }
    let degenerate = || MeasurementError::DegenerateCircle { station_m: station };
    let sol = ata.cholesky().ok_or_else(degenerate)?.solve(&aty);
    let (d, e, f) = (sol.x, sol.y, sol.z);
    let r_sq = d * d / 4.0 + e * e / 4.0 - f;
    if !(r_sq > 0.0 && r_sq.is_finite()) {
        return Err(degenerate());
    }
    let radius = r_sq.sqrt();
    let center = (-d / 2.0, -e / 2.0);
    let mut misfit_sq = 0.0;
    for &(a, b) in &planar {
        let dist = ((a - center.0).powi(2) + (b - center.1).powi(2)).sqrt();
        misfit_sq += (dist - radius) * (dist - radius);
    }
    Ok(CircleFit {
        diameter_mm: 2.0 * radius * 1000.0,
        residual_mm: (misfit_sq / planar.len() as f64).sqrt() * 1000.0,
        point_count: planar.len(),
        arc_coverage_deg: coverage,
    })
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            self.parent[i as usize] = self.parent[self.parent[i as usize] as usize];
            i = self.parent[i as usize];
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        // Size tie falls to the lower root so linking order cannot matter.
        let (hi, lo) = if (self.size[ra as usize], rb) > (self.size[rb as usize], ra) {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        self.size[hi as usize] += self.size[lo as usize];
    }
}

/// Single-linkage clustering of the Branch-labeled points.
///
/// Two branch points belong to the same cluster when a chain of points with
/// consecutive gaps of at most `link_radius` connects them. Clusters with
/// fewer than `min_cluster_points` points are discarded. Per surviving
/// cluster the attachment is the point closest to the trunk axis (ties to
/// the lowest point index) and the branch direction is the dominant scatter
/// eigenvector of the cluster points within [`LOCAL_DIR_RADIUS_M`] of the
/// attachment, oriented away from the axis. Ids count up the trunk in
/// attachment-station order. Degenerate inputs (no branch points, radius
/// that links nothing) yield an empty list, never an error.
pub fn cluster_branches(
    cloud: &LabeledPointCloud,
    axis: &TrunkAxis,
    link_radius: f64,
    min_cluster_points: usize,
) -> Vec<BranchInstance> {
    let branch: Vec<Vec3> = cloud
        .iter()
        .filter(|(_, l)| *l == PointLabel::Branch)
        .map(|(p, _)| *p)
        .collect();
    if branch.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::build(&branch);
    let mut uf = UnionFind::new(branch.len());
    if link_radius > 0.0 && link_radius.is_finite() {
        for (i, p) in branch.iter().enumerate() {
            for n in tree.within_radius(p, link_radius) {
                uf.union(i as u32, n.index as u32);
            }
        }
    }
    // Group members by root, clusters ordered by their first point index.
    let mut cluster_of_root: Vec<(u32, Vec<u32>)> = Vec::new();
    let mut slot_of_root = std::collections::HashMap::new();
    for i in 0..branch.len() as u32 {
        let root = uf.find(i);
        let slot = *slot_of_root.entry(root).or_insert_with(|| {
            cluster_of_root.push((root, Vec::new()));
            cluster_of_root.len() - 1
        });
        cluster_of_root[slot].1.push(i);
    }

    let mut instances: Vec<BranchInstance> = Vec::new();
    for (_, members) in cluster_of_root {
        if members.len() < min_cluster_points {
            continue;
        }
        let pts: Vec<Vec3> = members.iter().map(|&i| branch[i as usize]).collect();
        let mut attachment = pts[0];
        let mut best = axis.radial_distance(&attachment);
        for p in &pts[1..] {
            let d = axis.radial_distance(p);
            if d < best {
                best = d;
                attachment = *p;
            }
        }
        let local: Vec<Vec3> = pts
            .iter()
            .copied()
            .filter(|p| (p - attachment).norm() <= LOCAL_DIR_RADIUS_M)
            .collect();
        let rel = attachment - axis.point_v();
        let radial = rel - axis.dir_v() * rel.dot(&axis.dir_v());
        let (_, values, vectors) = scatter_eigen(&local);
        let mut dir = if values[0] > 1e-18 {
            vectors[0]
        } else if radial.norm() > 1e-9 {
            // All local points coincide; point straight away from the axis.
            radial.normalize()
        } else {
            Vec3::z()
        };
        let outward = if radial.norm() > 1e-9 {
            radial
        } else {
            dir
        };
        if dir.dot(&outward) < 0.0 {
            dir = -dir;
        } else if dir.dot(&outward) == 0.0 {
            dir = canonical_sign(dir);
        }
        let station_m = axis.station_of(&attachment);
        let labels = vec![PointLabel::Branch; pts.len()];
        instances.push(BranchInstance {
            id: 0, // assigned after the station sort below
            points: LabeledPointCloud::new(pts, labels).expect("cluster points are finite"),
            attachment,
            axis_dir: dir.normalize(),
            station_m,
        });
    }
    instances.sort_by(|a, b| a.station_m.total_cmp(&b.station_m));
    for (i, inst) in instances.iter_mut().enumerate() {
        inst.id = i as u32;
    }
    instances
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Full measurement report for one labeled tree cloud.
///
/// Trunk diameter is the median of slab fits at the configured fractions of
/// the trunk's axial extent. Each branch's diameter comes from a slab along
/// its own direction, `branch_offset_m` out from the attachment; a branch
/// whose fit fails is reported with absent values rather than failing the
/// report. Spacing pairs adjacent branches in station order.
pub fn measure_tree(
    cloud: &LabeledPointCloud,
    cfg: &MeasurementConfig,
) -> Result<MeasurementReport, MeasurementError> {
    cfg.validate()?;
    let axis = estimate_trunk_axis(cloud)?;
    let mut s_min = f64::INFINITY;
    let mut s_max = f64::NEG_INFINITY;
    for (p, l) in cloud.iter() {
        if l == PointLabel::Trunk {
            let s = axis.station_of(p);
            s_min = s_min.min(s);
            s_max = s_max.max(s);
        }
    }

    let mut diameters = Vec::new();
    let mut heights = Vec::new();
    let mut residuals = Vec::new();
    let mut failures = Vec::new();
    for &frac in &cfg.trunk_station_fractions {
        let station = s_min + frac * (s_max - s_min);
        match fit_circle_slab(
            cloud,
            &axis,
            station,
            cfg.trunk_slab_thickness_m,
            PointLabel::Trunk,
        ) {
            Ok(fit) => {
                diameters.push(fit.diameter_mm);
                heights.push(station - s_min);
                residuals.push(fit.residual_mm);
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if diameters.is_empty() {
        return Err(MeasurementError::TrunkFitFailed {
            detail: failures.join("; "),
        });
    }
    let trunk_diameter_mm = median(&mut diameters);

    let branches = cluster_branches(cloud, &axis, cfg.link_radius_m, cfg.min_cluster_points);
    let mut branch_diameters = Vec::with_capacity(branches.len());
    for b in &branches {
        let branch_axis = TrunkAxis {
            point: [b.attachment.x, b.attachment.y, b.attachment.z],
            dir: [b.axis_dir.x, b.axis_dir.y, b.axis_dir.z],
        };
        match fit_circle_slab(
            &b.points,
            &branch_axis,
            cfg.branch_offset_m,
            cfg.branch_slab_thickness_m,
            PointLabel::Branch,
        ) {
            Ok(fit) => branch_diameters.push(BranchDiameter {
                id: b.id,
                diameter_mm: Some(fit.diameter_mm),
                residual_mm: Some(fit.residual_mm),
                fit_error: None,
            }),
            Err(e) => branch_diameters.push(BranchDiameter {
                id: b.id,
                diameter_mm: None,
                residual_mm: None,
                fit_error: Some(e.to_string()),
            }),
        }
    }

    let mut spacings = Vec::new();
    for pair in branches.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let spacing_m = match cfg.spacing_mode {
            SpacingMode::OffsetPoints => {
                let off_a = a.attachment + a.axis_dir * cfg.branch_offset_m;
                let off_b = b.attachment + b.axis_dir * cfg.branch_offset_m;
                (off_b - off_a).norm()
            }
            SpacingMode::StationDifference => (b.station_m - a.station_m).abs(),
        };
        spacings.push(BranchSpacing {
            ids: [a.id, b.id],
            spacing_mm: spacing_m * 1000.0,
        });
    }

    Ok(MeasurementReport {
        trunk_diameter_mm,
        measurement_heights_m: heights,
        fit_residuals_mm: residuals,
        branch_count: branches.len(),
        branch_diameters_mm: branch_diameters,
        branch_spacings_mm: spacings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, RigidTransform, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Points on a cylinder surface around `base + t * dir`, t in
    /// [t0, t1], with radial Gaussian noise.
    #[allow(clippy::too_many_arguments)]
    fn cylinder_points(
        base: Vec3,
        dir: Vec3,
        radius: f64,
        t0: f64,
        t1: f64,
        n: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec3> {
        let dir = dir.normalize();
        let (e1, e2) = orthonormal_frame(&dir);
        (0..n)
            .map(|_| {
                let t = rng.gen_range(t0..t1);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius + sigma * gauss(rng);
                base + dir * t + (e1 * theta.cos() + e2 * theta.sin()) * r
            })
            .collect()
    }

    fn cloud_of(parts: Vec<(Vec<Vec3>, PointLabel)>) -> LabeledPointCloud {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (pts, label) in parts {
            labels.extend(std::iter::repeat(label).take(pts.len()));
            points.extend(pts);
        }
        LabeledPointCloud::new(points, labels).unwrap()
    }

    fn z_axis() -> TrunkAxis {
        TrunkAxis {
            point: [0.0, 0.0, 0.0],
            dir: [0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn trunk_axis_recovers_vertical_and_tilted_cylinders() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vertical = cylinder_points(
            Vec3::zeros(),
            Vec3::z(),
            0.045,
            0.0,
            1.0,
            4000,
            0.0,
            &mut rng,
        );
        let cloud = cloud_of(vec![(vertical, PointLabel::Trunk)]);
        let axis = estimate_trunk_axis(&cloud).unwrap();
        let angle = axis.dir_v().dot(&Vec3::z()).clamp(-1.0, 1.0).acos();
        assert!(angle < 0.5_f64.to_radians(), "vertical axis off by {angle} rad");

        let tilt = Vec3::new(10.0_f64.to_radians().sin(), 0.0, 10.0_f64.to_radians().cos());
        let tilted = cylinder_points(Vec3::zeros(), tilt, 0.045, 0.0, 1.0, 4000, 0.0, &mut rng);
        let cloud = cloud_of(vec![(tilted, PointLabel::Trunk)]);
        let axis = estimate_trunk_axis(&cloud).unwrap();
        let angle = axis.dir_v().dot(&tilt).clamp(-1.0, 1.0).acos();
        assert!(angle < 0.5_f64.to_radians(), "tilted axis off by {angle} rad");
    }

    #[test]
    fn trunk_axis_rejects_blobs_and_tiny_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let blob: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * 0.1)
            .collect();
        let cloud = cloud_of(vec![(blob, PointLabel::Trunk)]);
        assert!(matches!(
            estimate_trunk_axis(&cloud),
            Err(MeasurementError::AmbiguousAxis { .. })
        ));

        let few: Vec<Vec3> = (0..50).map(|i| Vec3::new(0.0, 0.0, i as f64 * 0.01)).collect();
        let cloud = cloud_of(vec![(few, PointLabel::Trunk)]);
        assert!(matches!(
            estimate_trunk_axis(&cloud),
            Err(MeasurementError::TooFewTrunkPoints { have: 50, need: 100 })
        ));
    }

    #[test]
    fn exact_circle_is_recovered_to_machine_precision() {
        // 16 exact points on a circle of radius 0.04 centered off-axis.
        let center = (0.01, -0.02);
        let pts: Vec<Vec3> = (0..16)
            .map(|i| {
                let th = i as f64 / 16.0 * std::f64::consts::TAU;
                Vec3::new(center.0 + 0.04 * th.cos(), center.1 + 0.04 * th.sin(), 0.0)
            })
            .collect();
        let cloud = cloud_of(vec![(pts, PointLabel::Trunk)]);
        let fit = fit_circle_slab(&cloud, &z_axis(), 0.0, 0.02, PointLabel::Trunk).unwrap();
        assert!((fit.diameter_mm - 80.0).abs() < 1e-6, "diameter {}", fit.diameter_mm);
        assert!(fit.residual_mm < 1e-6, "residual {}", fit.residual_mm);
        assert_eq!(fit.point_count, 16);
        // Coverage is measured around the axis, which sits off-center
        // inside this circle, so consecutive points subtend up to ~51 deg.
        assert!(fit.arc_coverage_deg > 300.0, "coverage {}", fit.arc_coverage_deg);
    }

    #[test]
    fn kasa_solution_minimizes_the_algebraic_objective() {
        // Independent optimality check: no nudge of (D, E, F) may lower
        // the algebraic cost the fit minimizes.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| {
                let th = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = 0.05 + 0.004 * gauss(&mut rng);
                Vec3::new(0.02 + r * th.cos(), -0.01 + r * th.sin(), rng.gen_range(-0.005..0.005))
            })
            .collect();
        let cloud = cloud_of(vec![(pts.clone(), PointLabel::Branch)]);
        let fit = fit_circle_slab(&cloud, &z_axis(), 0.0, 0.02, PointLabel::Branch).unwrap();
        let radius = fit.diameter_mm / 2000.0;

        // Recover (D, E, F) from the fitted circle: center via per-point
        // residual minimization is not exposed, so refit the center from
        // the algebraic identity using any three of the fitted quantities.
        // Instead, recompute the algebraic solution here and compare costs.
        let objective = |d: f64, e: f64, f: f64| {
            pts.iter()
                .map(|p| {
                    let (a, b) = (p.x, p.y);
                    let v = a * a + b * b + d * a + e * b + f;
                    v * v
                })
                .sum::<f64>()
        };
        // Reconstruct center from a fresh Kasa solve to probe around it.
        let mut ata = Matrix3::zeros();
        let mut aty = Vec3::zeros();
        for p in &pts {
            let row = Vec3::new(p.x, p.y, 1.0);
            ata += row * row.transpose();
            aty += row * -(p.x * p.x + p.y * p.y);
        }
        let sol = ata.cholesky().unwrap().solve(&aty);
        let r_check = (sol.x * sol.x / 4.0 + sol.y * sol.y / 4.0 - sol.z).sqrt();
        assert!((r_check - radius).abs() < 1e-12, "fit and probe disagree");
        let base = objective(sol.x, sol.y, sol.z);
        for step in [1e-4, 1e-3, 1e-2] {
            for delta in [
                (step, 0.0, 0.0),
                (-step, 0.0, 0.0),
                (0.0, step, 0.0),
                (0.0, -step, 0.0),
                (0.0, 0.0, step),
                (0.0, 0.0, -step),
            ] {
                let probed = objective(sol.x + delta.0, sol.y + delta.1, sol.z + delta.2);
                assert!(
                    probed >= base - 1e-15,
                    "nudge {delta:?} lowered the objective: {probed} < {base}"
                );
            }
        }
    }

    #[test]
    fn noisy_circle_diameter_stays_in_band() {
        // Radius 40 mm, sigma 2 mm radial noise, 200 points: at least 95
        // of 100 seeds within +/- 2 mm of the true 80 mm diameter.
        let mut inside = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..200)
                .map(|_| {
                    let th = rng.gen_range(0.0..std::f64::consts::TAU);
                    let r = 0.04 + 0.002 * gauss(&mut rng);
                    Vec3::new(r * th.cos(), r * th.sin(), rng.gen_range(-0.01..0.01))
                })
                .collect();
            let cloud = cloud_of(vec![(pts, PointLabel::Trunk)]);
            let fit = fit_circle_slab(&cloud, &z_axis(), 0.0, 0.02, PointLabel::Trunk).unwrap();
            if (fit.diameter_mm - 80.0).abs() <= 2.0 {
                inside += 1;
            }
        }
        assert!(inside >= 95, "only {inside}/100 fits within the 2 mm band");
    }

    #[test]
    fn half_arc_fit_stays_within_three_millimeters() {
        // One-sided scan: only 180 degrees of the cylinder visible.
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let pts: Vec<Vec3> = (0..200)
                .map(|_| {
                    let th = rng.gen_range(0.0..std::f64::consts::PI);
                    let r = 0.04 + 0.0015 * gauss(&mut rng);
                    Vec3::new(r * th.cos(), r * th.sin(), rng.gen_range(-0.01..0.01))
                })
                .collect();
            let cloud = cloud_of(vec![(pts, PointLabel::Trunk)]);
            let fit = fit_circle_slab(&cloud, &z_axis(), 0.0, 0.02, PointLabel::Trunk).unwrap();
            assert!(
                (fit.diameter_mm - 80.0).abs() <= 3.0,
                "seed {seed}: half-arc diameter {}",
                fit.diameter_mm
            );
        }
    }

    #[test]
    fn narrow_arcs_and_thin_slabs_are_rejected() {
        // 100 degrees of arc: refused, with the coverage reported.
        let pts: Vec<Vec3> = (0..50)
            .map(|i| {
                let th = (i as f64 / 49.0) * 100.0_f64.to_radians();
                Vec3::new(0.04 * th.cos(), 0.04 * th.sin(), 0.0)
            })
            .collect();
        let cloud = cloud_of(vec![(pts, PointLabel::Trunk)]);
        match fit_circle_slab(&cloud, &z_axis(), 0.0, 0.02, PointLabel::Trunk) {
            Err(MeasurementError::UnreliableArc { coverage_deg, .. }) => {
                assert!((coverage_deg - 100.0).abs() < 5.0, "coverage {coverage_deg}");
            }
            other => panic!("expected arc rejection, got {other:?}"),
        }

        // Slab away from the points: too few.
        match fit_circle_slab(&cloud, &z_axis(), 0.5, 0.02, PointLabel::Trunk) {
            Err(MeasurementError::InsufficientSlabPoints { have: 0, .. }) => {}
            other => panic!("expected insufficient points, got {other:?}"),
        }
    }

    #[test]
    fn single_linkage_matches_graph_connectivity_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let link = 0.05;
        let cloud = cloud_of(vec![(pts.clone(), PointLabel::Branch)]);
        let instances = cluster_branches(&cloud, &z_axis(), link, 1);

        // Oracle: breadth-first search over the exact epsilon graph.
        let n = pts.len();
        let mut cluster_id = vec![usize::MAX; n];
        let mut next = 0;
        for start in 0..n {
            if cluster_id[start] != usize::MAX {
                continue;
            }
            let mut queue = vec![start];
            cluster_id[start] = next;
            while let Some(i) = queue.pop() {
                for j in 0..n {
                    if cluster_id[j] == usize::MAX && (pts[i] - pts[j]).norm() <= link {
                        cluster_id[j] = next;
                        queue.push(j);
                    }
                }
            }
            next += 1;
        }
        let mut oracle: Vec<Vec<[u64; 3]>> = vec![Vec::new(); next];
        for (i, p) in pts.iter().enumerate() {
            oracle[cluster_id[i]].push([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]);
        }
        let canon = |mut clusters: Vec<Vec<[u64; 3]>>| {
            for c in &mut clusters {
                c.sort();
            }
            clusters.sort();
            clusters
        };
        let ours = canon(
            instances
                .iter()
                .map(|b| {
                    b.points
                        .points()
                        .iter()
                        .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
                        .collect()
                })
                .collect(),
        );
        assert_eq!(ours, canon(oracle));
    }

    #[test]
    fn clusters_separate_merge_and_filter_as_specified() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Two branches a meter apart stay distinct.
        let b1 = cylinder_points(
            Vec3::new(0.045, 0.0, 0.3),
            Vec3::x(),
            0.0125,
            0.0,
            0.3,
            600,
            0.0005,
            &mut rng,
        );
        let b2 = cylinder_points(
            Vec3::new(0.045, 0.0, 1.3),
            Vec3::x(),
            0.0125,
            0.0,
            0.3,
            600,
            0.0005,
            &mut rng,
        );
        let cloud = cloud_of(vec![
            (b1.clone(), PointLabel::Branch),
            (b2.clone(), PointLabel::Branch),
        ]);
        let instances = cluster_branches(&cloud, &z_axis(), 0.015, 30);
        assert_eq!(instances.len(), 2);
        assert_eq!(instances[0].points.len(), 600);
        assert_eq!(instances[1].points.len(), 600);
        assert!(instances[0].station_m < instances[1].station_m);
        assert_eq!((instances[0].id, instances[1].id), (0, 1));

        // Two parallel branches whose surfaces come within 5 mm merge.
        let near1 = cylinder_points(
            Vec3::new(0.045, 0.0, 0.5),
            Vec3::x(),
            0.0125,
            0.0,
            0.3,
            600,
            0.0,
            &mut rng,
        );
        let near2 = cylinder_points(
            Vec3::new(0.045, 0.0, 0.53),
            Vec3::x(),
            0.0125,
            0.0,
            0.3,
            600,
            0.0,
            &mut rng,
        );
        let cloud = cloud_of(vec![
            (near1, PointLabel::Branch),
            (near2, PointLabel::Branch),
        ]);
        let merged = cluster_branches(&cloud, &z_axis(), 0.015, 30);
        assert_eq!(merged.len(), 1, "5 mm gap with 15 mm link must merge");

        // Below min_cluster_points: dropped. No branch points: empty.
        let tiny: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.1, 0.0, i as f64 * 0.001)).collect();
        let cloud = cloud_of(vec![(tiny, PointLabel::Branch)]);
        assert!(cluster_branches(&cloud, &z_axis(), 0.015, 30).is_empty());
        let none = cloud_of(vec![(vec![Vec3::zeros(); 5], PointLabel::Trunk)]);
        assert!(cluster_branches(&none, &z_axis(), 0.015, 30).is_empty());
    }

    #[test]
    fn attachment_and_direction_point_out_from_the_trunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        // Branch along -x so the outward direction is negative.
        let pts = cylinder_points(
            Vec3::new(-0.045, 0.0, 0.6),
            -Vec3::x(),
            0.0125,
            0.0,
            0.35,
            1500,
            0.0005,
            &mut rng,
        );
        // The closest point to the axis, computed independently.
        let expected = pts
            .iter()
            .copied()
            .min_by(|a, b| {
                (a.x * a.x + a.y * a.y).total_cmp(&(b.x * b.x + b.y * b.y))
            })
            .unwrap();
        let cloud = cloud_of(vec![(pts, PointLabel::Branch)]);
        let instances = cluster_branches(&cloud, &z_axis(), 0.015, 30);
        assert_eq!(instances.len(), 1);
        let b = &instances[0];
        assert_eq!(b.attachment, expected);
        assert!((b.axis_dir.norm() - 1.0).abs() < 1e-9);
        let angle = b.axis_dir.dot(&-Vec3::x()).clamp(-1.0, 1.0).acos();
        assert!(angle < 5.0_f64.to_radians(), "direction off by {angle} rad");
    }

    /// A synthetic trellis tree: vertical trunk plus horizontal branches,
    /// with known diameters and attachment stations.
    fn test_tree(
        trunk_radius: f64,
        branch_radius: f64,
        branch_stations: &[(f64, f64)], // (z, azimuth sign +1/-1 along x)
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> LabeledPointCloud {
        let trunk = cylinder_points(
            Vec3::zeros(),
            Vec3::z(),
            trunk_radius,
            0.0,
            1.0,
            6000,
            sigma,
            rng,
        );
        let mut parts = vec![(trunk, PointLabel::Trunk)];
        for &(z, sign) in branch_stations {
            let dir = Vec3::x() * sign;
            let base = dir * trunk_radius + Vec3::new(0.0, 0.0, z);
            let branch =
                cylinder_points(base, dir, branch_radius, 0.0, 0.35, 1500, sigma, rng);
            parts.push((branch, PointLabel::Branch));
        }
        let clutter: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.0..1.0)))
            .collect();
        parts.push((clutter, PointLabel::Clutter));
        cloud_of(parts)
    }

    #[test]
    fn full_report_hits_known_tree_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let stations = [(0.25, 1.0), (0.50, 1.0), (0.75, 1.0)];
        let cloud = test_tree(0.045, 0.0125, &stations, 0.0005, &mut rng);
        let cfg = MeasurementConfig::default();
        let report = measure_tree(&cloud, &cfg).unwrap();

        assert!(
            (report.trunk_diameter_mm - 90.0).abs() < 2.0,
            "trunk diameter {}",
            report.trunk_diameter_mm
        );
        assert_eq!(report.measurement_heights_m.len(), 3);
        assert!(report
            .measurement_heights_m
            .windows(2)
            .all(|w| w[0] < w[1]));
        assert!(report.fit_residuals_mm.iter().all(|&r| r >= 0.0 && r < 3.0));
        assert_eq!(report.branch_count, 3);
        assert_eq!(report.branch_diameters_mm.len(), 3);
        for b in &report.branch_diameters_mm {
            let d = b.diameter_mm.expect("branch fit succeeded");
            assert!((d - 25.0).abs() < 3.0, "branch {} diameter {d}", b.id);
        }
        assert_eq!(report.branch_spacings_mm.len(), 2);

        // The same-azimuth layout keeps offset points vertically aligned,
        // but each attachment may sit one branch radius above or below its
        // station. Compare against the spacing implied by the actual
        // attachments rather than the nominal 250 mm.
        let axis = estimate_trunk_axis(&cloud).unwrap();
        let branches = cluster_branches(&cloud, &axis, cfg.link_radius_m, cfg.min_cluster_points);
        for (i, s) in report.branch_spacings_mm.iter().enumerate() {
            assert_eq!(s.ids, [i as u32, i as u32 + 1]);
            let off_a = branches[i].attachment + branches[i].axis_dir * cfg.branch_offset_m;
            let off_b =
                branches[i + 1].attachment + branches[i + 1].axis_dir * cfg.branch_offset_m;
            let expected = (off_b - off_a).norm() * 1000.0;
            assert!((s.spacing_mm - expected).abs() < 1e-9);
            assert!(
                (s.spacing_mm - 250.0).abs() < 30.0,
                "spacing {} too far from nominal",
                s.spacing_mm
            );
        }
    }

    #[test]
    fn spacing_modes_differ_for_alternating_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        // Alternating azimuths: offset points land on opposite sides.
        let stations = [(0.25, 1.0), (0.50, -1.0), (0.75, 1.0)];
        let cloud = test_tree(0.045, 0.0125, &stations, 0.0005, &mut rng);

        let offsets = measure_tree(&cloud, &MeasurementConfig::default()).unwrap();
        let along = measure_tree(
            &cloud,
            &MeasurementConfig {
                spacing_mode: SpacingMode::StationDifference,
                ..MeasurementConfig::default()
            },
        )
        .unwrap();
        // Station mode: ~250 mm. Offset mode: the hypotenuse over the
        // ~192 mm lateral gap between opposite-side offset points.
        for s in &along.branch_spacings_mm {
            assert!((s.spacing_mm - 250.0).abs() < 30.0, "station spacing {}", s.spacing_mm);
        }
        let lateral = 2.0 * (0.045 + TWO_INCH_OFFSET_M) * 1000.0;
        let expected = (250.0_f64.powi(2) + lateral.powi(2)).sqrt();
        for s in &offsets.branch_spacings_mm {
            assert!(
                (s.spacing_mm - expected).abs() < 40.0,
                "offset spacing {} vs expected {expected}",
                s.spacing_mm
            );
        }
    }

    #[test]
    fn tapered_trunk_reports_the_median_station() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        // Piecewise trunk: three bands with different radii, so the three
        // station fits see 45, 40, and 35 mm.
        let mut parts = Vec::new();
        for (r, z0, z1) in [(0.045, 0.0, 0.34), (0.040, 0.34, 0.67), (0.035, 0.67, 1.0)] {
            parts.push((
                cylinder_points(Vec3::zeros(), Vec3::z(), r, z0, z1, 3000, 0.0003, &mut rng),
                PointLabel::Trunk,
            ));
        }
        let cloud = cloud_of(parts);
        let report = measure_tree(&cloud, &MeasurementConfig::default()).unwrap();
        assert!(
            (report.trunk_diameter_mm - 80.0).abs() < 2.0,
            "median diameter {}",
            report.trunk_diameter_mm
        );
        assert_eq!(report.branch_count, 0);
        assert!(report.branch_diameters_mm.is_empty());
        assert!(report.branch_spacings_mm.is_empty());
    }

    #[test]
    fn report_is_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let stations = [(0.3, 1.0), (0.55, -1.0), (0.8, 1.0)];
        let cloud = test_tree(0.045, 0.0125, &stations, 0.0004, &mut rng);
        let base = measure_tree(&cloud, &MeasurementConfig::default()).unwrap();

        let g = se3_exp(&Twist::new(
            Vec3::new(0.2, -0.15, 0.3),
            Vec3::new(0.4, -0.8, 0.25),
        ));
        let moved = crate::geometry::apply_transform(&cloud, &g);
        let report = measure_tree(&moved, &MeasurementConfig::default()).unwrap();

        assert!((report.trunk_diameter_mm - base.trunk_diameter_mm).abs() < 0.1);
        assert_eq!(report.branch_count, base.branch_count);
        for (a, b) in report
            .branch_diameters_mm
            .iter()
            .zip(&base.branch_diameters_mm)
        {
            assert_eq!(a.id, b.id);
            let (da, db) = (a.diameter_mm.unwrap(), b.diameter_mm.unwrap());
            assert!((da - db).abs() < 0.1, "branch {} moved {da} vs {db}", a.id);
        }
        for (a, b) in report.branch_spacings_mm.iter().zip(&base.branch_spacings_mm) {
            assert!((a.spacing_mm - b.spacing_mm).abs() < 0.1);
        }
        let _ = RigidTransform::identity(); // keep the import honest
    }

    #[test]
    fn report_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let cloud = test_tree(0.045, 0.0125, &[(0.4, 1.0), (0.7, -1.0)], 0.0005, &mut rng);
        let a = measure_tree(&cloud, &MeasurementConfig::default()).unwrap();
        let b = measure_tree(&cloud, &MeasurementConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn per_branch_fit_failures_leave_absent_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let trunk = cylinder_points(Vec3::zeros(), Vec3::z(), 0.045, 0.0, 1.0, 6000, 0.0005, &mut rng);
        // A real branch plus a stub too short to reach the two-inch slab.
        let good = cylinder_points(
            Vec3::new(0.045, 0.0, 0.3),
            Vec3::x(),
            0.0125,
            0.0,
            0.35,
            1500,
            0.0005,
            &mut rng,
        );
        let stub = cylinder_points(
            Vec3::new(0.045, 0.0, 0.7),
            Vec3::x(),
            0.0125,
            0.0,
            0.03,
            120,
            0.0005,
            &mut rng,
        );
        let cloud = cloud_of(vec![
            (trunk, PointLabel::Trunk),
            (good, PointLabel::Branch),
            (stub, PointLabel::Branch),
        ]);
        let report = measure_tree(&cloud, &MeasurementConfig::default()).unwrap();
        assert_eq!(report.branch_count, 2);
        let good_entry = &report.branch_diameters_mm[0];
        let stub_entry = &report.branch_diameters_mm[1];
        assert!(good_entry.diameter_mm.is_some());
        assert!(good_entry.fit_error.is_none());
        assert!(stub_entry.diameter_mm.is_none());
        assert!(stub_entry.residual_mm.is_none());
        assert!(stub_entry.fit_error.is_some());
        // Spacing still reported: it needs attachments, not fits.
        assert_eq!(report.branch_spacings_mm.len(), 1);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = MeasurementConfig::default();
        cfg.link_radius_m = 0.0;
        assert!(matches!(
            measure_tree(&cloud_of(vec![]), &cfg),
            Err(MeasurementError::BadConfig { .. })
        ));
        let mut cfg = MeasurementConfig::default();
        cfg.trunk_station_fractions = vec![1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = MeasurementConfig::default();
        cfg.min_cluster_points = 0;
        assert!(cfg.validate().is_err());
        assert!(MeasurementConfig::default().validate().is_ok());
    }
}
