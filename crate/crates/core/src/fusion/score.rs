use crate::geometry::project;
use crate::lm::{reprojection_cost, ReprojectionTerm};
use crate::Model;

use super::{CandidateSet, DetectionWeights, FusionConfig, FusionError, LiftedDetection};

/// One reprojection term per keypoint with nonzero effective weight: the
/// target is `proj_i(T_i k_j)`, or absent when `T_i k_j` is behind camera `i`.
pub fn fusion_terms(
    lifted: &[LiftedDetection],
    weights: &[DetectionWeights],
    model: &Model,
) -> Result<Vec<ReprojectionTerm<f64>>, FusionError> {
    if lifted.len() != weights.len() {
        return Err(FusionError::WeightCountMismatch {
            weights: weights.len(),
            detections: lifted.len(),
        });
    }
    let mut terms = Vec::new();
    for (l, w) in lifted.iter().zip(weights) {
        let d = &l.detection;
        let view = d.camera_pose.inverse();
        let observed = view.compose(&l.object_pose);
        for (kp, &conf) in model.keypoints.iter().zip(&d.keypoint_confidences) {
            let weight = w.effective(conf);
            if weight == 0.0 {
                continue;
            }
            terms.push(ReprojectionTerm {
                point: *kp,
                view,
                intrinsics: d.intrinsics,
                target: project(&observed, &d.intrinsics, kp).ok(),
                weight,
            });
        }
    }
    Ok(terms)
}

/// Weighted multi-view reprojection objective of candidate `pose`.
pub fn score_candidate(
    pose: &crate::Pose,
    lifted: &[LiftedDetection],
    weights: &[DetectionWeights],
    model: &Model,
    cfg: &FusionConfig,
) -> Result<f64, FusionError> {
    let terms = fusion_terms(lifted, weights, model)?;
    Ok(reprojection_cost(pose, &terms, cfg.behind_camera_penalty))
}

/// Index and score of the lowest-scoring candidate; ties go to the lowest index.
pub fn select_best(
    candidates: &CandidateSet,
    terms: &[ReprojectionTerm<f64>],
    penalty: f64,
) -> Result<(usize, f64), FusionError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.candidates.iter().enumerate() {
        let s = reprojection_cost(&c.pose, terms, penalty);
        if best.map_or(true, |(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.ok_or(FusionError::EmptyCandidateSet)
}
