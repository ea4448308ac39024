use mvscene::fusion::{
    fuse_instances, fuse_object_poses, fusion_terms, score_candidate, select_best, FusionConfig,
};
use mvscene::geometry::rotation_geodesic;
use mvscene::lm::reprojection_cost;
use mvscene::synth::{camera_arc, render_detections, DetectionNoise, SceneObject, SyntheticScene};
use mvscene::{Intrinsics, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(objects: Vec<SceneObject>, seed: u64) -> SyntheticScene {
    let k = Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).unwrap();
    let cams = camera_arc(&Point3::new(0.0, 0.0, 0.04), 8, 0.8, 0.6, 120.0, k);
    SyntheticScene::new(objects, cams, 0.5, seed)
}

fn one_box(seed: u64) -> SyntheticScene {
    let obj = SceneObject::cuboid("box", Vector3::new(0.15, 0.10, 0.08), 0.02, -0.01, 0.4 + seed as f64, 300, seed);
    scene(vec![obj], seed)
}

#[test]
fn estimate_scores_no_worse_than_any_candidate() {
    for seed in 0..5 {
        let s = one_box(seed);
        let dets = render_detections(&s, &DetectionNoise::default(), seed);
        let cfg = FusionConfig::default();
        for inst in fuse_instances(&dets, &s.objects[0].model, &cfg, seed) {
            let inst = inst.unwrap();
            let terms = fusion_terms(&inst.lifted, &inst.weights, &s.objects[0].model).unwrap();
            let best = inst
                .candidates
                .candidates
                .iter()
                .map(|c| reprojection_cost(&c.pose, &terms, cfg.behind_camera_penalty))
                .fold(f64::INFINITY, f64::min);
            assert!(inst.estimate.objective <= best);
            let direct = score_candidate(&inst.estimate.pose, &inst.lifted, &inst.weights, &s.objects[0].model, &cfg).unwrap();
            assert!((direct - inst.estimate.objective).abs() <= 1e-9 * direct.max(1.0));
        }
    }
}

#[test]
fn select_best_is_the_argmin_with_lowest_index_ties() {
    let s = one_box(3);
    let dets = render_detections(&s, &DetectionNoise::default(), 3);
    let cfg = FusionConfig::default();
    let inst = fuse_instances(&dets, &s.objects[0].model, &cfg, 3).remove(0).unwrap();
    let terms = fusion_terms(&inst.lifted, &inst.weights, &s.objects[0].model).unwrap();
    let mut cands = inst.candidates.clone();
    let (i, score) = select_best(&cands, &terms, cfg.behind_camera_penalty).unwrap();
    for c in &cands.candidates {
        assert!(score <= reprojection_cost(&c.pose, &terms, cfg.behind_camera_penalty));
    }
    // A duplicate of the winner appended at the end must not displace it.
    cands.candidates.push(cands.candidates[i]);
    assert_eq!(select_best(&cands, &terms, cfg.behind_camera_penalty).unwrap().0, i);
    assert!(select_best(&Default::default(), &terms, 1.0).is_err());
}

#[test]
fn fusion_is_deterministic_and_input_order_invariant() {
    let s = one_box(11);
    let dets = render_detections(&s, &DetectionNoise::default(), 11);
    let cfg = FusionConfig::default();
    let a = fuse_object_poses(&dets, &s.objects[0].model, &cfg, 5);
    let b = fuse_object_poses(&dets, &s.objects[0].model, &cfg, 5);
    assert_eq!(a, b);
    let mut shuffled = dets.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let c = fuse_object_poses(&shuffled, &s.objects[0].model, &cfg, 5);
    assert_eq!(a.len(), c.len());
    for (x, y) in a.iter().zip(&c) {
        assert_eq!(x.pose, y.pose);
        assert_eq!(x.objective, y.objective);
    }
}

#[test]
fn two_instances_of_one_class_are_fused_separately() {
    let objs = vec![
        SceneObject::cuboid("box", Vector3::new(0.12, 0.08, 0.06), -0.15, 0.0, 0.3, 300, 1),
        SceneObject::cuboid("box", Vector3::new(0.12, 0.08, 0.06), 0.15, 0.05, -0.7, 300, 2),
    ];
    let s = scene(objs, 21);
    let dets = render_detections(&s, &DetectionNoise::default(), 21);
    let est = fuse_object_poses(&dets, &s.objects[0].model, &FusionConfig::default(), 21);
    assert_eq!(est.len(), 2);
    for obj in &s.objects {
        let hit = est
            .iter()
            .any(|e| (e.pose.translation - obj.pose.translation).norm() < 0.02 && rotation_geodesic(&e.pose.rotation, &obj.pose.rotation) < 0.1);
        assert!(hit, "no estimate near object at {:?}", obj.pose.translation);
    }
    // Each view sees each box once, so a correct grouping uses a view at most once per instance.
    for e in &est {
        let mut ids = e.detection_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), e.detection_ids.len());
    }
}

#[test]
fn other_classes_are_ignored() {
    let s = one_box(4);
    let dets = render_detections(&s, &DetectionNoise::default(), 4);
    let mut model = s.objects[0].model.clone();
    model.class_id = "mug".into();
    assert!(fuse_object_poses(&dets, &model, &FusionConfig::default(), 4).is_empty());
}
