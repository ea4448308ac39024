//! Pose, reconstruction and detection metrics.
//!
//! Missed detections enter accuracy curves with infinite error, so a method
//! that detects fewer objects is penalised in the AUC even when its
//! successful estimates are accurate.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::geometry::RigidPose;
use crate::scalar::{cast, Real};
use crate::shapes::PrimitiveShape;
use crate::spatial::KdTree;

/// F-score thresholds, meters, for desk, human and cabinet scenes.
pub const FSCORE_PRESETS: [(&str, f64); 3] = [("desk", 0.025), ("human", 0.035), ("cabinet", 0.025)];

pub fn fscore_preset(name: &str) -> Option<f64> {
    FSCORE_PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Mean distance between corresponding transformed model points.
pub fn add_metric<T: Real>(est: &RigidPose<T>, gt: &RigidPose<T>, model_points: &[Point3<T>]) -> T {
    assert!(!model_points.is_empty(), "ADD needs model points");
    // Differencing the transforms first keeps a pure translation offset exact.
    let dr = est.rotation_matrix() - gt.rotation_matrix();
    let dt = est.translation - gt.translation;
    running_mean(model_points.iter().map(|p| (dr * p.coords + dt).norm()))
}

/// Mean over estimated points of the distance to the closest ground-truth
/// point. Uses a k-d tree; equal to the quadratic definition.
pub fn add_s_metric<T: Real>(est: &RigidPose<T>, gt: &RigidPose<T>, model_points: &[Point3<T>]) -> T {
    assert!(!model_points.is_empty(), "ADD-S needs model points");
    let gt_points: Vec<Point3<T>> = model_points.iter().map(|p| gt.transform_point(p)).collect();
    let tree = KdTree::new(&gt_points);
    running_mean(
        model_points
            .iter()
            .map(|p| tree.nearest_distance(&est.transform_point(p)).unwrap_or_else(T::zero)),
    )
}

/// Welford-style mean; returns `x` exactly when every value equals `x`.
fn running_mean<T: Real>(values: impl Iterator<Item = T>) -> T {
    let mut mean = T::zero();
    for (k, x) in values.enumerate() {
        mean += (x - mean) / cast((k + 1) as f64);
    }
    mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    /// Ascending, meters, from 0 to the maximum threshold.
    pub thresholds: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// Trapezoidal area divided by the maximum threshold.
    pub auc: f64,
}

impl AccuracyCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,accuracy\n");
        for (t, a) in self.thresholds.iter().zip(&self.accuracies) {
            s.push_str(&format!("{t},{a}\n"));
        }
        s
    }
}

/// Fraction of errors `≤ t` at `steps` evenly spaced thresholds on
/// `[0, max_threshold]`. Pass `f64::INFINITY` for missed detections.
pub fn accuracy_curve(errors: &[f64], max_threshold: f64, steps: usize) -> AccuracyCurve {
    assert!(steps >= 2, "accuracy curve needs at least two thresholds");
    assert!(max_threshold > 0.0, "max threshold must be positive");
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let thresholds: Vec<f64> = (0..steps).map(|i| max_threshold * i as f64 / (steps - 1) as f64).collect();
    let accuracies: Vec<f64> = thresholds
        .iter()
        .map(|&t| if n == 0 { 0.0 } else { sorted.partition_point(|&e| e <= t) as f64 / n as f64 })
        .collect();
    let area: f64 = thresholds
        .windows(2)
        .zip(accuracies.windows(2))
        .map(|(t, a)| (t[1] - t[0]) * (a[0] + a[1]) / 2.0)
        .sum();
    AccuracyCurve {
        thresholds,
        accuracies,
        auc: area / max_threshold,
    }
}

/// Errors for an accuracy curve, with `None` (missed) mapped to infinity.
pub fn errors_with_misses(errors: &[Option<f64>]) -> Vec<f64> {
    errors.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect()
}

/// Ground-truth vertices whose nearest cloud point lies within `epsilon`.
pub fn filter_gt_vertices<T: Real>(vertices: &[Point3<T>], cloud: &[Point3<T>], epsilon: T) -> Vec<Point3<T>> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::new(cloud);
    let e2 = epsilon * epsilon;
    vertices
        .iter()
        .filter(|v| tree.nearest(v).is_some_and(|(_, d2)| d2 <= e2))
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub prediction: usize,
    pub ground_truth: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub matches: Vec<Match>,
    /// Predictions that lost to a better one on the same ground truth or lie
    /// farther than the assignment distance from every ground truth.
    pub false_positives: Vec<usize>,
    /// Ground truths without any assigned prediction.
    pub false_negatives: Vec<usize>,
}

/// Assigns each prediction to its nearest ground-truth centroid (ties to the
/// lower index) when within `max_distance`; per ground truth, the assignment
/// with the lowest `metric(prediction, gt)` is the match.
pub fn assign_predictions<F>(
    predictions: &[Point3<f64>],
    ground_truths: &[Point3<f64>],
    max_distance: f64,
    metric: F,
) -> Assignment
where
    F: Fn(usize, usize) -> f64,
{
    let mut per_gt: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ground_truths.len()];
    let mut out = Assignment::default();
    for (i, p) in predictions.iter().enumerate() {
        let nearest = ground_truths
            .iter()
            .enumerate()
            .map(|(g, q)| (g, (p - q).norm()))
            .fold(None, |best: Option<(usize, f64)>, c| match best {
                Some(b) if b.1 <= c.1 => Some(b),
                _ => Some(c),
            });
        match nearest {
            Some((g, d)) if d <= max_distance => per_gt[g].push((i, metric(i, g))),
            _ => out.false_positives.push(i),
        }
    }
    for (g, cands) in per_gt.into_iter().enumerate() {
        let best = cands
            .iter()
            .copied()
            .fold(None, |best: Option<(usize, f64)>, c| match best {
                Some(b) if b.1 <= c.1 => Some(b),
                _ => Some(c),
            });
        match best {
            Some((i, m)) => {
                out.matches.push(Match {
                    prediction: i,
                    ground_truth: g,
                    metric: m,
                });
                out.false_positives.extend(cands.iter().filter(|c| c.0 != i).map(|c| c.0));
            }
            None => out.false_negatives.push(g),
        }
    }
    out.false_positives.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn fraction_within<T: Real>(from: &[Point3<T>], to: &KdTree<T>, threshold: T) -> f64 {
    let t2 = threshold * threshold;
    let hits = from.iter().filter(|p| to.nearest(p).is_some_and(|(_, d2)| d2 <= t2)).count();
    hits as f64 / from.len() as f64
}

/// Precision of `reconstructed` against `gt`, recall the other way round,
/// and their harmonic mean (zero when both are zero).
pub fn f_score<T: Real>(reconstructed: &[Point3<T>], gt: &[Point3<T>], threshold: T) -> FScore {
    assert!(!reconstructed.is_empty() && !gt.is_empty(), "F-score needs two nonempty clouds");
    let precision = fraction_within(reconstructed, &KdTree::new(gt), threshold);
    let recall = fraction_within(gt, &KdTree::new(reconstructed), threshold);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    FScore { precision, recall, f }
}

/// Anything that can claim ground-truth points as explained.
pub trait Covers {
    fn covers(&self, p: &Point3<f64>, tolerance: f64) -> bool;
}

impl Covers for PrimitiveShape {
    fn covers(&self, p: &Point3<f64>, tolerance: f64) -> bool {
        PrimitiveShape::covers(self, p, tolerance)
    }
}

/// A known model placed at an estimated pose, represented by its vertices.
#[derive(Debug, Clone)]
pub struct PosedModel {
    tree: KdTree<f64>,
}

impl PosedModel {
    pub fn new(pose: &RigidPose<f64>, vertices: &[Point3<f64>]) -> Self {
        let placed: Vec<_> = vertices.iter().map(|v| pose.transform_point(v)).collect();
        Self {
            tree: KdTree::new(&placed),
        }
    }
}

impl Covers for PosedModel {
    fn covers(&self, p: &Point3<f64>, tolerance: f64) -> bool {
        self.tree.nearest(p).is_some_and(|(_, d2)| d2 <= tolerance * tolerance)
    }
}

/// Whether some output covers at least half of the object's points.
pub fn is_detected(outputs: &[&dyn Covers], gt_points: &[Point3<f64>], tolerance: f64) -> bool {
    !gt_points.is_empty()
        && outputs.iter().any(|o| {
            let hits = gt_points.iter().filter(|p| o.covers(p, tolerance)).count();
            2 * hits >= gt_points.len()
        })
}

/// Fraction of ground-truth objects detected; zero objects gives zero.
pub fn detection_rate(outputs: &[&dyn Covers], gt_point_sets: &[Vec<Point3<f64>>], tolerance: f64) -> f64 {
    if gt_point_sets.is_empty() {
        return 0.0;
    }
    let hit = gt_point_sets.iter().filter(|g| is_detected(outputs, g, tolerance)).count();
    hit as f64 / gt_point_sets.len() as f64
}

/// Evaluation defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Meters; ground-truth vertices farther than this from the cloud are
    /// discarded before shape evaluation.
    pub gt_vertex_epsilon: f64,
    /// Meters; predictions farther than this from every ground-truth
    /// centroid are false positives.
    pub assignment_distance: f64,
    /// Meters; tolerance for a ground-truth point to count as covered.
    pub coverage_tolerance: f64,
    /// Meters; right end of the accuracy curve.
    pub curve_max_threshold: f64,
    pub curve_steps: usize,
    /// Meters; F-score distance threshold.
    pub fscore_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gt_vertex_epsilon: 0.01,
            assignment_distance: 0.1,
            coverage_tolerance: 0.01,
            curve_max_threshold: 0.1,
            curve_steps: 101,
            fscore_threshold: 0.025,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("gt_vertex_epsilon", self.gt_vertex_epsilon),
            ("assignment_distance", self.assignment_distance),
            ("coverage_tolerance", self.coverage_tolerance),
            ("curve_max_threshold", self.curve_max_threshold),
            ("fscore_threshold", self.fscore_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("evaluation.{name} must be positive and finite"));
            }
        }
        if self.curve_steps < 2 {
            return Err("evaluation.curve_steps must be at least 2".into());
        }
        Ok(())
    }
}
