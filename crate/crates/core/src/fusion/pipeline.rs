use std::cmp::Ordering;

use log::{debug, warn};

use crate::lm::{refine_pose, LmOptions, LmReport};
use crate::pnp::{pnp_consistency_weight, solve_pnp, ConsistencyConfig, PnpError};
use crate::{Detection, Model, Pose};

use super::{
    augment_stage2, compute_avg_weight, compute_resample_weights, derive_seed, fusion_terms, sample_rotation_candidates,
    score_candidate, select_best, xmeans_rotations, CandidateSet, DetectionWeights, FusedEstimate, FusionConfig,
    FusionError, LiftedDetection, RotationClusters,
};

/// World-from-object pose of one detection from PnP on its visible keypoints.
pub fn lift_detection(d: &Detection, model: &Model) -> Result<Pose, PnpError<f64>> {
    let corrs = d.correspondences(model);
    if corrs.len() < 4 {
        return Err(PnpError::TooFewCorrespondences { got: corrs.len() });
    }
    let camera_from_object = solve_pnp(&corrs, &d.intrinsics, None)?.pose;
    Ok(d.camera_pose.compose(&camera_from_object))
}

/// Indices of the entries kept by the confidence and isolation filters.
pub fn filter_candidates(lifted: &[(Pose, DetectionWeights)], cfg: &FusionConfig) -> Result<Vec<usize>, FusionError> {
    let confident: Vec<usize> = (0..lifted.len())
        .filter(|&i| lifted[i].1.w_avg * lifted[i].1.w_pnp >= cfg.confidence_floor)
        .collect();
    if confident.len() <= 1 {
        return if confident.is_empty() { Err(FusionError::EmptyAfterFilter) } else { Ok(confident) };
    }
    let kept: Vec<usize> = confident
        .iter()
        .copied()
        .filter(|&i| {
            confident.iter().any(|&j| {
                j != i && (lifted[i].0.translation - lifted[j].0.translation).norm() <= cfg.pairwise_distance_threshold
            })
        })
        .collect();
    if kept.is_empty() {
        Err(FusionError::EmptyAfterFilter)
    } else {
        Ok(kept)
    }
}

/// Single-linkage groups of translations closer than `radius`; groups and
/// their members are in ascending index order.
pub fn group_instances(poses: &[Pose], radius: f64) -> Vec<Vec<usize>> {
    let n = poses.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (poses[i].translation - poses[j].translation).norm() <= radius {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

fn lm_options(cfg: &FusionConfig) -> LmOptions<f64> {
    LmOptions {
        max_iterations: cfg.lm_max_iterations,
        behind_camera_penalty: cfg.behind_camera_penalty,
        ..LmOptions::default()
    }
}

/// Levenberg–Marquardt on the fusion objective starting from `pose`.
pub fn refine_pose_lm(
    pose: &Pose,
    lifted: &[LiftedDetection],
    weights: &[DetectionWeights],
    model: &Model,
    cfg: &FusionConfig,
) -> Result<LmReport<f64>, FusionError> {
    let terms = fusion_terms(lifted, weights, model)?;
    Ok(refine_pose(pose, &terms, &lm_options(cfg)))
}

/// Everything produced while fusing one instance.
#[derive(Debug, Clone)]
pub struct InstanceFusion {
    pub estimate: FusedEstimate,
    /// Detections that survived filtering, in fusion order.
    pub lifted: Vec<LiftedDetection>,
    /// Final weights, parallel to `lifted`.
    pub weights: Vec<DetectionWeights>,
    pub clusters: RotationClusters,
    /// Stage-1 and stage-2 candidates; `estimate` scores no worse than any.
    pub candidates: CandidateSet,
    pub stage1_best: usize,
    pub stage2_best: usize,
    pub lm: LmReport<f64>,
}

/// Fuses detections already known to belong to one instance.
pub fn fuse_instance(
    lifted: Vec<LiftedDetection>,
    weights: Vec<DetectionWeights>,
    model: &Model,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<InstanceFusion, FusionError> {
    if lifted.len() != weights.len() {
        return Err(FusionError::WeightCountMismatch {
            weights: weights.len(),
            detections: lifted.len(),
        });
    }
    let entries: Vec<(Pose, DetectionWeights)> = lifted.iter().zip(&weights).map(|(l, w)| (l.object_pose, *w)).collect();
    let kept = filter_candidates(&entries, cfg)?;
    let lifted: Vec<LiftedDetection> = kept.iter().map(|&i| lifted[i].clone()).collect();
    let mut weights: Vec<DetectionWeights> = kept.iter().map(|&i| weights[i]).collect();
    let penalty = cfg.behind_camera_penalty;

    let bases: Vec<Pose> = lifted.iter().map(|l| l.object_pose).collect();
    let mut candidates = sample_rotation_candidates(
        &bases,
        cfg.stage1_rotation_samples,
        cfg.stage1_rotation_sigma,
        derive_seed(seed, 0, 1),
    );
    let terms = fusion_terms(&lifted, &weights, model)?;
    let (stage1_best, _) = select_best(&candidates, &terms, penalty)?;
    let t_star = candidates.candidates[stage1_best].pose;

    let rotations: Vec<_> = bases.iter().map(|p| p.rotation).collect();
    let clusters = xmeans_rotations(&rotations, cfg.xmeans_max_clusters);
    let resample = compute_resample_weights(&clusters, &t_star.rotation, cfg.resample_sigma);
    for (w, r) in weights.iter_mut().zip(resample) {
        w.w_resample = r;
    }
    debug!("{} detections in {} rotation clusters", lifted.len(), clusters.len());

    candidates.extend(augment_stage2(&t_star, cfg, derive_seed(seed, 0, 2)));
    let terms = fusion_terms(&lifted, &weights, model)?;
    let (stage2_best, _) = select_best(&candidates, &terms, penalty)?;
    let chosen = candidates.candidates[stage2_best];
    let lm = refine_pose(&chosen.pose, &terms, &lm_options(cfg));
    let objective = score_candidate(&lm.pose, &lifted, &weights, model, cfg)?;

    let estimate = FusedEstimate {
        class_id: model.class_id.clone(),
        pose: lm.pose,
        objective,
        provenance: chosen.provenance,
        detection_ids: lifted.iter().map(|l| l.detection.view_id.clone()).collect(),
        weights: weights.clone(),
        lm_iterations: lm.iterations,
    };
    Ok(InstanceFusion {
        estimate,
        lifted,
        weights,
        clusters,
        candidates,
        stage1_best,
        stage2_best,
        lm,
    })
}

fn content_order(a: &LiftedDetection, b: &LiftedDetection) -> Ordering {
    let ka = a.detection.camera_pose.translation.iter().chain(a.object_pose.translation.iter());
    let kb = b.detection.camera_pose.translation.iter().chain(b.object_pose.translation.iter());
    for (x, y) in ka.zip(kb) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Lifts, weights and groups detections of `model`'s class, then fuses each
/// instance. Instances whose detections are all filtered out are dropped.
///
/// Detections are processed in an order derived from their content, so the
/// result does not depend on input order.
pub fn fuse_instances(
    detections: &[Detection],
    model: &Model,
    cfg: &FusionConfig,
    seed: u64,
) -> Vec<Result<InstanceFusion, FusionError>> {
    let consistency = ConsistencyConfig {
        tau_px: cfg.pnp_tau_px,
        weight_floor: cfg.pnp_weight_floor,
    };
    let mut lifted: Vec<(LiftedDetection, DetectionWeights)> = Vec::new();
    for d in detections.iter().filter(|d| d.class_id == model.class_id) {
        if let Err(e) = d.check_model(model) {
            warn!("skipping detection: {e}");
            continue;
        }
        match lift_detection(d, model) {
            Ok(object_pose) => {
                let w_pnp = pnp_consistency_weight(d, model, &consistency).unwrap_or(consistency.weight_floor);
                let w = DetectionWeights::new(compute_avg_weight(d), w_pnp);
                lifted.push((
                    LiftedDetection {
                        detection: d.clone(),
                        object_pose,
                    },
                    w,
                ));
            }
            Err(e) => debug!("detection in view {} dropped: {e}", d.view_id),
        }
    }
    lifted.sort_by(|a, b| content_order(&a.0, &b.0));
    let poses: Vec<Pose> = lifted.iter().map(|l| l.0.object_pose).collect();
    group_instances(&poses, cfg.instance_cluster_radius)
        .into_iter()
        .enumerate()
        .map(|(g, members)| {
            let (ls, ws): (Vec<_>, Vec<_>) = members.iter().map(|&i| lifted[i].clone()).unzip();
            fuse_instance(ls, ws, model, cfg, derive_seed(seed, g as u64 + 1, 0))
        })
        .collect()
}

/// [`fuse_instances`] keeping only successful estimates.
pub fn fuse_object_poses(detections: &[Detection], model: &Model, cfg: &FusionConfig, seed: u64) -> Vec<FusedEstimate> {
    fuse_instances(detections, model, cfg, seed)
        .into_iter()
        .filter_map(|r| match r {
            Ok(f) => Some(f.estimate),
            Err(e) => {
                debug!("instance dropped: {e}");
                None
            }
        })
        .collect()
}
