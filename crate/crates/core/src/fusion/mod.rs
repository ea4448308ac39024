//! Multi-view fusion of per-view keypoint detections into object poses.
//!
//! Every detection of a class is lifted to a world-frame pose `T_i` by PnP
//! and weighted by its mean keypoint confidence (`w_avg`) and its
//! leave-one-out keypoint stability (`w_pnp`). Candidates sampled around the
//! lifted rotations are scored by the weighted multi-view reprojection
//! objective
//!
//! ```text
//! E(T) = Σ_i Σ_j w̃_ij ‖proj_i(T k_j) − proj_i(T_i k_j)‖²,
//! w̃_ij = w_resample,i · w_pnp,i · w_avg,i · w_ij
//! ```
//!
//! where `proj_i` projects through camera `i`. The rotations are then
//! clustered (X-means), clusters that disagree with the best candidate are
//! down-weighted (`w_resample`), the candidate set is widened around the best
//! pose, rescored, and the winner is polished by Levenberg–Marquardt.

mod pipeline;
mod sampling;
mod score;
mod weights;
pub mod xmeans;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Detection, Pose};

pub use pipeline::{
    filter_candidates, fuse_instance, fuse_instances, fuse_object_poses, group_instances, lift_detection,
    refine_pose_lm, InstanceFusion,
};
pub use sampling::{augment_stage2, derive_seed, sample_rotation_candidates};
pub use score::{fusion_terms, score_candidate, select_best};
pub use weights::{compute_avg_weight, compute_resample_weights};
pub use xmeans::{xmeans_rotations, RotationClusters};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("no detection of this object survived filtering")]
    EmptyAfterFilter,
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("weights and detections differ in length ({weights} vs {detections})")]
    WeightCountMismatch { weights: usize, detections: usize },
}

/// Per-detection weight factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionWeights {
    pub w_avg: f64,
    pub w_pnp: f64,
    pub w_resample: f64,
}

impl DetectionWeights {
    pub fn new(w_avg: f64, w_pnp: f64) -> Self {
        Self {
            w_avg,
            w_pnp,
            w_resample: 1.0,
        }
    }

    /// Detection-level factor `w_resample · w_pnp · w_avg`.
    pub fn detection_factor(&self) -> f64 {
        self.w_resample * self.w_pnp * self.w_avg
    }

    /// Effective keypoint weight `w̃ = w_resample · w_pnp · w_avg · w_j`.
    pub fn effective(&self, keypoint_confidence: f64) -> f64 {
        self.detection_factor() * keypoint_confidence
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Detected,
    RotationSampled,
    Stage2Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub pose: Pose,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn extend(&mut self, other: CandidateSet) {
        self.candidates.extend(other.candidates);
    }
}

/// A detection together with its lifted world-from-object pose `T_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedDetection {
    pub detection: Detection,
    pub object_pose: Pose,
}

/// The winning pose for one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEstimate {
    pub class_id: String,
    /// World-from-object pose `T*`.
    pub pose: Pose,
    /// Objective value at `pose`.
    pub objective: f64,
    pub provenance: Provenance,
    pub detection_ids: Vec<String>,
    pub weights: Vec<DetectionWeights>,
    pub lm_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub stage1_rotation_samples: usize,
    /// Radians.
    pub stage1_rotation_sigma: f64,
    pub stage2_translation_samples: usize,
    /// In units of `translation_unit_scale` meters.
    pub stage2_translation_sigma: f64,
    pub stage2_rotation_samples: usize,
    /// Radians.
    pub stage2_rotation_sigma: f64,
    /// Meters per unit of `stage2_translation_sigma`.
    pub translation_unit_scale: f64,
    /// Detections with `w_avg · w_pnp` below this are discarded.
    pub confidence_floor: f64,
    /// Meters; a detection farther than this from every other one is dropped.
    pub pairwise_distance_threshold: f64,
    /// Radians; width of the Gaussian on cluster-to-best rotation distance.
    pub resample_sigma: f64,
    /// Meters; single-linkage radius grouping detections into instances.
    pub instance_cluster_radius: f64,
    /// Squared pixels charged per keypoint projecting behind a camera.
    pub behind_camera_penalty: f64,
    pub pnp_tau_px: f64,
    pub pnp_weight_floor: f64,
    pub xmeans_max_clusters: usize,
    pub lm_max_iterations: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            stage1_rotation_samples: 20,
            stage1_rotation_sigma: 0.001,
            stage2_translation_samples: 100,
            stage2_translation_sigma: 0.25,
            stage2_rotation_samples: 10,
            stage2_rotation_sigma: 0.01,
            translation_unit_scale: 1.0,
            confidence_floor: 0.05,
            pairwise_distance_threshold: 0.1,
            resample_sigma: 0.2,
            instance_cluster_radius: 0.15,
            behind_camera_penalty: 1e4,
            pnp_tau_px: 5.0,
            pnp_weight_floor: 0.1,
            xmeans_max_clusters: 8,
            lm_max_iterations: 100,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), String> {
        let sigmas = [
            ("stage1_rotation_sigma", self.stage1_rotation_sigma),
            ("stage2_translation_sigma", self.stage2_translation_sigma),
            ("stage2_rotation_sigma", self.stage2_rotation_sigma),
            ("resample_sigma", self.resample_sigma),
            ("translation_unit_scale", self.translation_unit_scale),
            ("pnp_tau_px", self.pnp_tau_px),
            ("instance_cluster_radius", self.instance_cluster_radius),
            ("pairwise_distance_threshold", self.pairwise_distance_threshold),
        ];
        for (name, v) in sigmas {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("fusion.{name} must be positive, got {v}"));
            }
        }
        let counts = [
            ("stage1_rotation_samples", self.stage1_rotation_samples),
            ("stage2_translation_samples", self.stage2_translation_samples),
            ("stage2_rotation_samples", self.stage2_rotation_samples),
            ("xmeans_max_clusters", self.xmeans_max_clusters),
            ("lm_max_iterations", self.lm_max_iterations),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(format!("fusion.{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) || !(0.0..=1.0).contains(&self.pnp_weight_floor) {
            return Err("fusion confidence floors must lie in [0, 1]".into());
        }
        if !(self.behind_camera_penalty >= 0.0) {
            return Err("fusion.behind_camera_penalty must be nonnegative".into());
        }
        Ok(())
    }
}
