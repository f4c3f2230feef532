//! Rigid alignment of labeled point clouds.
//!
//! Three correspondence models share one damped Gauss-Newton optimizer over
//! SE(3):
//!
//! * [`Method::Icp`]: point-to-point, unit residual weights.
//! * [`Method::Gicp`]: distribution-to-distribution; every point carries a
//!   plane-regularized neighborhood covariance and each residual is weighted
//!   by `(C_target + R C_source R^T)^-1`.
//! * [`Method::FastGicp`]: the target is collapsed into a voxel grid of
//!   Gaussian cells (count, mean, covariance) and each transformed source
//!   point pairs with the cell that contains it, skipping the nearest
//!   neighbor search entirely.
//!
//! The optimizer freezes the correspondence set for each outer iteration and
//! only accepts a step when the cost over that frozen set does not rise, so
//! every recorded `(before, after)` pair in the cost trace is non-increasing
//! by construction. Correspondences are then re-resolved at the accepted
//! pose. All reductions run over fixed-size chunks folded in index order, so
//! results are bit-identical at any thread count.

use crate::evaluation::{fitness_score, EvalError, FitnessOutcome};
use crate::geometry::{hat, se3_exp, LabeledPointCloud, PointLabel, RigidTransform, Twist, Vec3};
use crate::spatial::KdTree;
use nalgebra::{Cholesky, Matrix3, Matrix3x6, Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;
use thiserror::Error;

/// Fewest correspondences the normal equations are solved with.
pub const MIN_CORRESPONDENCES: usize = 6;

/// Eigenvalue spectrum every point covariance is snapped to, largest first.
/// The two unit directions span the local surface, the small one is its
/// normal; weighting by the inverse pulls residuals onto the surface plane.
pub const PLANE_EIGENVALUES: [f64; 3] = [1.0, 1.0, 1e-3];

const CHUNK: usize = 1024;
const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("bad registration config: {detail}")]
    BadConfig { detail: String },
    #[error("{which} cloud has {have} usable points, need at least {need}")]
    TooFewPoints {
        which: &'static str,
        have: usize,
        need: usize,
    },
    #[error("voxel grid kept no cell with {min_points}+ points (voxel {voxel_size} m)")]
    EmptyVoxelGrid { voxel_size: f64, min_points: usize },
    #[error("{have} correspondences at iteration {iteration}, need {need}")]
    TooFewCorrespondences {
        have: usize,
        need: usize,
        iteration: usize,
    },
    #[error("normal matrix stayed singular up to damping {lambda:.1e} at iteration {iteration}")]
    SingularNormalMatrix { iteration: usize, lambda: f64 },
    #[error("non-finite cost at iteration {iteration}; input geometry is degenerate")]
    NumericalBreakdown { iteration: usize },
    #[error("no source point pairs with the target at the final pose")]
    NoOverlap,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Correspondence model. See the module docs for the differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Icp,
    Gicp,
    FastGicp,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "icp" => Ok(Method::Icp),
            "gicp" => Ok(Method::Gicp),
            "fast_gicp" | "fast-gicp" | "fastgicp" => Ok(Method::FastGicp),
            other => Err(format!(
                "unknown method {other:?}, expected icp, gicp, or fast_gicp"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub method: Method,
    pub max_iterations: usize,
    /// Converged when an accepted step moves the translation less than this (m).
    pub translation_eps: f64,
    /// Converged when an accepted step rotates less than this (rad).
    pub rotation_eps: f64,
    /// Nearest-neighbor pairing cutoff for cloud targets (m).
    pub max_corr_dist: f64,
    /// Neighborhood size for covariance estimation, the point itself included.
    pub k_neighbors: usize,
    /// Cell edge of the Gaussian voxel grid (m), fast_gicp only.
    pub voxel_size: f64,
    /// Cells with fewer members than this are dropped from the grid.
    pub min_voxel_points: usize,
    /// Initial damping added to the normal matrix diagonal.
    pub init_lambda: f64,
    /// Restrict both clouds to trunk-labeled points before aligning.
    pub trunk_only: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            method: Method::Gicp,
            max_iterations: 64,
            translation_eps: 1e-5,
            rotation_eps: 1e-5,
            max_corr_dist: 0.05,
            k_neighbors: 20,
            voxel_size: 0.02,
            min_voxel_points: 6,
            init_lambda: 1e-6,
            trunk_only: false,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |detail: String| Err(RegistrationError::BadConfig { detail });
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if !(self.translation_eps > 0.0 && self.translation_eps.is_finite()) {
            return bad(format!("translation_eps must be positive, got {}", self.translation_eps));
        }
        if !(self.rotation_eps > 0.0 && self.rotation_eps.is_finite()) {
            return bad(format!("rotation_eps must be positive, got {}", self.rotation_eps));
        }
        if !(self.max_corr_dist > 0.0 && self.max_corr_dist.is_finite()) {
            return bad(format!("max_corr_dist must be positive, got {}", self.max_corr_dist));
        }
        if self.k_neighbors < 4 {
            return bad(format!("k_neighbors must be at least 4, got {}", self.k_neighbors));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if self.min_voxel_points == 0 {
            return bad("min_voxel_points must be at least 1".into());
        }
        if !(self.init_lambda > 0.0 && self.init_lambda.is_finite()) {
            return bad(format!("init_lambda must be positive, got {}", self.init_lambda));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// False when the loop exhausted `max_iterations` before the step-size
    /// thresholds were met. The transform is still the best pose found.
    pub converged: bool,
    /// Accepted optimizer steps, equal to `cost_trace.len()`.
    pub iterations: usize,
    /// Cost re-evaluated at the final pose over freshly resolved
    /// correspondences (a sum over pairs, not a mean).
    pub final_cost: f64,
    /// Mean nearest-neighbor displacement at the final pose (m).
    pub fitness_m: f64,
    /// Mean squared nearest-neighbor displacement at the final pose (m^2).
    pub mse_m2: f64,
    /// Pairs within `max_corr_dist` at the final pose.
    pub inlier_count: usize,
    /// `(before, after)` frozen-set cost of every accepted step, in order.
    pub cost_trace: Vec<(f64, f64)>,
}

/// Raw sample covariance of each point's k-nearest neighborhood (the point
/// itself counts as a neighbor), normalized by the neighbor count.
pub fn neighborhood_covariances(points: &[Vec3], k: usize) -> Vec<Matrix3<f64>> {
    let tree = KdTree::build(points);
    let k = k.min(points.len()).max(1);
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let neighbors = tree.k_nearest(&points[i], k);
            let mut mean = Vec3::zeros();
            for n in &neighbors {
                mean += points[n.index];
            }
            mean /= neighbors.len() as f64;
            let mut cov = Matrix3::zeros();
            for n in &neighbors {
                let d = points[n.index] - mean;
                cov += d * d.transpose();
            }
            cov / neighbors.len() as f64
        })
        .collect()
}

/// Snap a covariance to the plane spectrum: same eigenvectors, eigenvalues
/// replaced by [`PLANE_EIGENVALUES`] in descending order.
pub fn regularize_covariance(raw: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (raw + raw.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut out = Matrix3::zeros();
    for (rank, &col) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(col);
        out += v * v.transpose() * PLANE_EIGENVALUES[rank];
    }
    out
}

/// Plane-regularized neighborhood covariances for every point.
pub fn estimate_covariances(points: &[Vec3], k: usize) -> Vec<Matrix3<f64>> {
    neighborhood_covariances(points, k)
        .par_iter()
        .map(regularize_covariance)
        .collect()
}

/// Per-cell Gaussian statistics of the target cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCell {
    pub count: u32,
    pub mean: Vec3,
    /// Mean of the member covariances plus the scatter of the member points
    /// about the cell mean.
    pub cov: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianVoxelGrid {
    voxel_size: f64,
    keys: BTreeMap<[i64; 3], u32>,
    cells: Vec<GaussianCell>,
}

impl GaussianVoxelGrid {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn key_of(&self, p: &Vec3) -> [i64; 3] {
        [
            (p.x / self.voxel_size).floor() as i64,
            (p.y / self.voxel_size).floor() as i64,
            (p.z / self.voxel_size).floor() as i64,
        ]
    }

    /// The cell whose voxel contains `p`, if the grid kept one there.
    pub fn cell_containing(&self, p: &Vec3) -> Option<&GaussianCell> {
        self.keys
            .get(&self.key_of(p))
            .map(|&i| &self.cells[i as usize])
    }

    pub fn cells(&self) -> &[GaussianCell] {
        &self.cells
    }
}

/// Collapse `points` (with per-point covariances) into Gaussian cells keyed
/// by `floor(coordinate / voxel_size)`. Cells with fewer than `min_points`
/// members are dropped.
pub fn build_gaussian_voxel_grid(
    points: &[Vec3],
    covariances: &[Matrix3<f64>],
    voxel_size: f64,
    min_points: usize,
) -> GaussianVoxelGrid {
    assert_eq!(points.len(), covariances.len(), "one covariance per point");
    struct Accum {
        count: u32,
        sum_p: Vec3,
        sum_cov: Matrix3<f64>,
        sum_ppt: Matrix3<f64>,
    }
    let mut accum: BTreeMap<[i64; 3], Accum> = BTreeMap::new();
    for (p, c) in points.iter().zip(covariances) {
        let key = [
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        ];
        let a = accum.entry(key).or_insert_with(|| Accum {
            count: 0,
            sum_p: Vec3::zeros(),
            sum_cov: Matrix3::zeros(),
            sum_ppt: Matrix3::zeros(),
        });
        a.count += 1;
        a.sum_p += p;
        a.sum_cov += c;
        a.sum_ppt += p * p.transpose();
    }
    let mut keys = BTreeMap::new();
    let mut cells = Vec::new();
    for (key, a) in accum {
        if (a.count as usize) < min_points {
            continue;
        }
        let n = a.count as f64;
        let mean = a.sum_p / n;
        let cov = a.sum_cov / n + a.sum_ppt / n - mean * mean.transpose();
        keys.insert(key, cells.len() as u32);
        cells.push(GaussianCell {
            count: a.count,
            mean,
            cov,
        });
    }
    GaussianVoxelGrid {
        voxel_size,
        keys,
        cells,
    }
}

enum TargetIndex {
    Cloud {
        points: Vec<Vec3>,
        covariances: Option<Vec<Matrix3<f64>>>,
        tree: KdTree,
    },
    Grid(GaussianVoxelGrid),
}

impl TargetIndex {
    fn resolve(&self, moved: &Vec3, max_corr_dist: f64) -> Option<u32> {
        match self {
            TargetIndex::Cloud { tree, .. } => tree
                .nearest_within(moved, max_corr_dist)
                .map(|n| n.index as u32),
            TargetIndex::Grid(grid) => grid.keys.get(&grid.key_of(moved)).copied(),
        }
    }

    fn pair_data(&self, tgt: u32) -> (&Vec3, Option<&Matrix3<f64>>) {
        match self {
            TargetIndex::Cloud {
                points,
                covariances,
                ..
            } => (
                &points[tgt as usize],
                covariances.as_ref().map(|c| &c[tgt as usize]),
            ),
            TargetIndex::Grid(grid) => {
                let cell = &grid.cells[tgt as usize];
                (&cell.mean, Some(&cell.cov))
            }
        }
    }
}

struct Workspace {
    src: Vec<Vec3>,
    src_labels: Vec<PointLabel>,
    src_covs: Option<Vec<Matrix3<f64>>>,
    tgt_pts: Vec<Vec3>,
    tgt_labels: Vec<PointLabel>,
    target: TargetIndex,
}

#[derive(Clone, Copy)]
struct Corr {
    src: u32,
    tgt: u32,
}

fn usable(cloud: &LabeledPointCloud, trunk_only: bool) -> (Vec<Vec3>, Vec<PointLabel>) {
    let filtered = cloud.filter_labels(|l| {
        if trunk_only {
            l == PointLabel::Trunk
        } else {
            l != PointLabel::Background
        }
    });
    filtered.into_parts()
}

fn prepare(
    source: &LabeledPointCloud,
    target: &LabeledPointCloud,
    cfg: &RegistrationConfig,
) -> Result<Workspace, RegistrationError> {
    cfg.validate()?;
    let (src, src_labels) = usable(source, cfg.trunk_only);
    let (tgt_pts, tgt_labels) = usable(target, cfg.trunk_only);
    let need = match cfg.method {
        Method::Icp => MIN_CORRESPONDENCES,
        Method::Gicp | Method::FastGicp => cfg.k_neighbors.max(MIN_CORRESPONDENCES),
    };
    if src.len() < need {
        return Err(RegistrationError::TooFewPoints {
            which: "source",
            have: src.len(),
            need,
        });
    }
    if tgt_pts.len() < need {
        return Err(RegistrationError::TooFewPoints {
            which: "target",
            have: tgt_pts.len(),
            need,
        });
    }
    let src_covs = match cfg.method {
        Method::Icp => None,
        Method::Gicp | Method::FastGicp => Some(estimate_covariances(&src, cfg.k_neighbors)),
    };
    let target = match cfg.method {
        Method::Icp => TargetIndex::Cloud {
            tree: KdTree::build(&tgt_pts),
            points: tgt_pts.clone(),
            covariances: None,
        },
        Method::Gicp => TargetIndex::Cloud {
            tree: KdTree::build(&tgt_pts),
            covariances: Some(estimate_covariances(&tgt_pts, cfg.k_neighbors)),
            points: tgt_pts.clone(),
        },
        Method::FastGicp => {
            let covs = estimate_covariances(&tgt_pts, cfg.k_neighbors);
            let grid =
                build_gaussian_voxel_grid(&tgt_pts, &covs, cfg.voxel_size, cfg.min_voxel_points);
            if grid.is_empty() {
                return Err(RegistrationError::EmptyVoxelGrid {
                    voxel_size: cfg.voxel_size,
                    min_points: cfg.min_voxel_points,
                });
            }
            TargetIndex::Grid(grid)
        }
    };
    Ok(Workspace {
        src,
        src_labels,
        src_covs,
        tgt_pts,
        tgt_labels,
        target,
    })
}

fn resolve_all(ws: &Workspace, t: &RigidTransform, max_corr_dist: f64) -> Vec<Corr> {
    let hits: Vec<Option<u32>> = (0..ws.src.len())
        .into_par_iter()
        .map(|i| ws.target.resolve(&t.apply(&ws.src[i]), max_corr_dist))
        .collect();
    hits.into_iter()
        .enumerate()
        .filter_map(|(i, tgt)| {
            tgt.map(|tgt| Corr {
                src: i as u32,
                tgt,
            })
        })
        .collect()
}

/// Residual `d = b - T(a)` and the optional information weight for one pair.
/// `None` means the identity weight (point-to-point).
fn residual_weight(
    ws: &Workspace,
    c: &Corr,
    t: &RigidTransform,
) -> (Vec3, Vec3, Option<Matrix3<f64>>) {
    let x = t.apply(&ws.src[c.src as usize]);
    let (b, cb) = ws.target.pair_data(c.tgt);
    let d = b - x;
    let w = match (&ws.src_covs, cb) {
        (Some(src_covs), Some(cb)) => {
            let r = t.rotation();
            let ca = &src_covs[c.src as usize];
            let m = cb + r * ca * r.transpose();
            // Regularized covariances keep this well conditioned; a failed
            // factorization means poisoned input and is surfaced as a
            // non-finite cost by the caller.
            Some(match Cholesky::new(m) {
                Some(chol) => chol.inverse(),
                None => Matrix3::from_element(f64::NAN),
            })
        }
        _ => None,
    };
    (x, d, w)
}

fn pair_cost(d: &Vec3, w: &Option<Matrix3<f64>>) -> f64 {
    match w {
        Some(w) => (w * d).dot(d),
        None => d.dot(d),
    }
}

/// Cost over a frozen correspondence set at pose `t`, weights re-evaluated
/// at `t`'s rotation. Chunked fold in index order: bit-stable across thread
/// counts.
fn frozen_cost(ws: &Workspace, corr: &[Corr], t: &RigidTransform) -> f64 {
    let partials: Vec<f64> = corr
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut cost = 0.0;
            for c in chunk {
                let (_, d, w) = residual_weight(ws, c, t);
                cost += pair_cost(&d, &w);
            }
            cost
        })
        .collect();
    partials.into_iter().sum()
}

fn normal_equations(
    ws: &Workspace,
    corr: &[Corr],
    t: &RigidTransform,
) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let partials: Vec<(Matrix6<f64>, Vector6<f64>, f64)> = corr
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut h = Matrix6::zeros();
            let mut g = Vector6::zeros();
            let mut cost = 0.0;
            for c in chunk {
                let (x, d, w) = residual_weight(ws, c, t);
                let mut j = Matrix3x6::<f64>::zeros();
                j.fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&(-Matrix3::identity()));
                j.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&x));
                match &w {
                    Some(w) => {
                        let jtw = j.transpose() * w;
                        h += jtw * j;
                        g += jtw * d;
                    }
                    None => {
                        h += j.transpose() * j;
                        g += j.transpose() * d;
                    }
                }
                cost += pair_cost(&d, &w);
            }
            (h, g, cost)
        })
        .collect();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut cost = 0.0;
    for (hp, gp, cp) in partials {
        h += hp;
        g += gp;
        cost += cp;
    }
    (h, g, cost)
}

/// Alignment cost of `transform` under `cfg`: the same quantity the
/// optimizer minimizes, with correspondences resolved at `transform`. The
/// setup (filtering, covariances, grid) is rebuilt exactly as [`register`]
/// builds it, so this reproduces the optimizer's cost values bit for bit.
pub fn alignment_cost(
    source: &LabeledPointCloud,
    target: &LabeledPointCloud,
    transform: &RigidTransform,
    cfg: &RegistrationConfig,
) -> Result<f64, RegistrationError> {
    let ws = prepare(source, target, cfg)?;
    let corr = resolve_all(&ws, transform, cfg.max_corr_dist);
    Ok(frozen_cost(&ws, &corr, transform))
}

/// Estimate the rigid transform mapping `source` onto `target`, starting
/// from `init`.
///
/// Each outer iteration resolves correspondences once, then searches the
/// damped-step family `(H + lambda I) delta = -g` until the frozen-set cost
/// does not rise; acceptance applies `T <- exp(delta) T` and relaxes the
/// damping, rejection escalates it tenfold. Convergence is declared when an
/// accepted step is smaller than both epsilons. Hitting `max_iterations` is
/// not an error: the result carries `converged = false`.
pub fn register(
    source: &LabeledPointCloud,
    target: &LabeledPointCloud,
    init: &RigidTransform,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    let ws = prepare(source, target, cfg)?;
    let mut t = *init;
    let mut lambda = cfg.init_lambda;
    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut converged = false;

    'outer: for iteration in 0..cfg.max_iterations {
        let corr = resolve_all(&ws, &t, cfg.max_corr_dist);
        if corr.len() < MIN_CORRESPONDENCES {
            return Err(RegistrationError::TooFewCorrespondences {
                have: corr.len(),
                need: MIN_CORRESPONDENCES,
                iteration,
            });
        }
        let (h, g, cost_before) = normal_equations(&ws, &corr, &t);
        if !cost_before.is_finite() {
            return Err(RegistrationError::NumericalBreakdown { iteration });
        }
        loop {
            let damped = h + Matrix6::identity() * lambda;
            let Some(chol) = Cholesky::new(damped) else {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    return Err(RegistrationError::SingularNormalMatrix { iteration, lambda });
                }
                continue;
            };
            let delta = chol.solve(&(-g));
            let dv = Vec3::new(delta[0], delta[1], delta[2]);
            let dw = Vec3::new(delta[3], delta[4], delta[5]);
            let candidate = se3_exp(&Twist::new(dw, dv)).compose(&t);
            let cost_after = frozen_cost(&ws, &corr, &candidate);
            if cost_after.is_finite() && cost_after <= cost_before {
                t = candidate;
                trace.push((cost_before, cost_after));
                lambda = (lambda * 0.1).max(LAMBDA_MIN);
                if dv.norm() < cfg.translation_eps && dw.norm() < cfg.rotation_eps {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // Even a vanishing step cannot lower the frozen cost: this
                // pose is a local minimum of the current problem.
                converged = true;
                break 'outer;
            }
        }
        if converged {
            break;
        }
    }

    let t = t.renormalized();
    let src_cloud = LabeledPointCloud::new(ws.src.clone(), ws.src_labels.clone())
        .expect("filtered points stay finite");
    let tgt_cloud = LabeledPointCloud::new(ws.tgt_pts.clone(), ws.tgt_labels.clone())
        .expect("filtered points stay finite");
    let (fitness_m, mse_m2, inlier_count) =
        match fitness_score(&src_cloud, &tgt_cloud, &t, cfg.max_corr_dist)? {
            FitnessOutcome::Overlap(r) => (r.fitness_m, r.mse_m2, r.pair_count),
            FitnessOutcome::NoOverlap { .. } => return Err(RegistrationError::NoOverlap),
        };
    let final_corr = resolve_all(&ws, &t, cfg.max_corr_dist);
    let final_cost = frozen_cost(&ws, &final_corr, &t);

    Ok(RegistrationResult {
        transform: t,
        converged,
        iterations: trace.len(),
        final_cost,
        fitness_m,
        mse_m2,
        inlier_count,
        cost_trace: trace,
    })
}
