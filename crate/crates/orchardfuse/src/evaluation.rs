//! Alignment and segmentation quality metrics.
//!
//! Every quantity here is either exact arithmetic over its inputs or an
//! explicit "undefined" outcome; nothing silently substitutes 0 or NaN when
//! a denominator vanishes. Alignment fitness follows the mean nearest
//! neighbor displacement of the transformed source against the target,
//! gated by a maximum pairing distance, with the companion mean squared
//! displacement reported alongside.

use crate::geometry::{LabeledPointCloud, PointLabel, RigidTransform};
use crate::spatial::KdTree;
use serde::Serialize;
use thiserror::Error;

/// Pairing cutoff used by fitness when the caller has no better value (m).
pub const DEFAULT_FITNESS_MAX_DIST_M: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty {which} cloud")]
    EmptyCloud { which: &'static str },
    #[error("length mismatch: {left} vs {right} values")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty value sequences")]
    EmptySequence,
    #[error("max pairing distance must be positive and finite, got {value}")]
    BadMaxDist { value: f64 },
}

/// Alignment fitness over the pairs within `max_dist`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitnessReport {
    /// Mean Euclidean displacement over paired points, meters.
    pub fitness_m: f64,
    /// Mean squared displacement over the same pairs, square meters.
    pub mse_m2: f64,
    pub pair_count: usize,
    pub max_dist_m: f64,
}

/// Outcome of [`fitness_score`]: either a populated report or the explicit
/// statement that nothing paired within the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FitnessOutcome {
    Overlap(FitnessReport),
    NoOverlap {
        no_overlap: bool,
        pair_count: usize,
        max_dist_m: f64,
    },
}

impl FitnessOutcome {
    pub fn report(&self) -> Option<&FitnessReport> {
        match self {
            FitnessOutcome::Overlap(r) => Some(r),
            FitnessOutcome::NoOverlap { .. } => None,
        }
    }
}

/// Mean nearest-neighbor displacement of `transform(source)` against
/// `target`, pairing each source point with its nearest target point and
/// keeping pairs no farther than `max_dist` (inclusive).
///
/// Zero surviving pairs is a real outcome (disjoint scans), reported as
/// [`FitnessOutcome::NoOverlap`] rather than a number.
pub fn fitness_score(
    source: &LabeledPointCloud,
    target: &LabeledPointCloud,
    transform: &RigidTransform,
    max_dist: f64,
) -> Result<FitnessOutcome, EvalError> {
    if source.is_empty() {
        return Err(EvalError::EmptyCloud { which: "source" });
    }
    if target.is_empty() {
        return Err(EvalError::EmptyCloud { which: "target" });
    }
    if !(max_dist.is_finite() && max_dist > 0.0) {
        return Err(EvalError::BadMaxDist { value: max_dist });
    }
    let tree = KdTree::build(target.points());
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut pairs = 0usize;
    for p in source.points() {
        let moved = transform.apply(p);
        let n = tree.nearest(&moved).expect("target verified non-empty");
        if n.dist_sq <= max_dist * max_dist {
            sum += n.dist_sq.sqrt();
            sum_sq += n.dist_sq;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(FitnessOutcome::NoOverlap {
            no_overlap: true,
            pair_count: 0,
            max_dist_m: max_dist,
        });
    }
    Ok(FitnessOutcome::Overlap(FitnessReport {
        fitness_m: sum / pairs as f64,
        mse_m2: sum_sq / pairs as f64,
        pair_count: pairs,
        max_dist_m: max_dist,
    }))
}

/// Root mean squared error between paired value sequences.
pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    paired(predicted, truth)?;
    let n = predicted.len() as f64;
    let sum_sq: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum_sq / n).sqrt())
}

/// Mean absolute error between paired value sequences.
pub fn mae(predicted: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    paired(predicted, truth)?;
    let n = predicted.len() as f64;
    let sum: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / n)
}

fn paired(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    Ok(())
}

/// One-vs-rest confusion counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Ratio metrics for one class; `None` marks a 0/0 outcome, which stays
/// undefined instead of collapsing to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationReport {
    pub trunk: ClassMetrics,
    pub branch: ClassMetrics,
    pub clutter: ClassMetrics,
    /// Unweighted mean of the defined per-class IoUs; None when every class
    /// is undefined.
    pub mean_iou: Option<f64>,
}

impl SegmentationReport {
    pub fn class(&self, label: PointLabel) -> Option<&ClassMetrics> {
        match label {
            PointLabel::Trunk => Some(&self.trunk),
            PointLabel::Branch => Some(&self.branch),
            PointLabel::Clutter => Some(&self.clutter),
            PointLabel::Background => None,
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn class_metrics(counts: ConfusionCounts) -> ClassMetrics {
    let iou = ratio(counts.tp, counts.tp + counts.fp + counts.fn_);
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    ClassMetrics {
        counts,
        iou,
        precision,
        recall,
        f1,
    }
}

/// Per-class one-vs-rest segmentation metrics over paired label sequences
/// (cloud labels or flattened mask pixels; background is "rest" everywhere).
pub fn segmentation_metrics(
    predicted: &[PointLabel],
    truth: &[PointLabel],
) -> Result<SegmentationReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    let mut counts = [ConfusionCounts::default(); 3];
    for (&p, &t) in predicted.iter().zip(truth) {
        for (slot, class) in [PointLabel::Trunk, PointLabel::Branch, PointLabel::Clutter]
            .iter()
            .enumerate()
        {
            match (p == *class, t == *class) {
                (true, true) => counts[slot].tp += 1,
                (true, false) => counts[slot].fp += 1,
                (false, true) => counts[slot].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let trunk = class_metrics(counts[0]);
    let branch = class_metrics(counts[1]);
    let clutter = class_metrics(counts[2]);
    let defined: Vec<f64> = [trunk.iou, branch.iou, clutter.iou]
        .into_iter()
        .flatten()
        .collect();
    let mean_iou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(SegmentationReport {
        trunk,
        branch,
        clutter,
        mean_iou,
    })
}
