use std::collections::{BTreeMap, HashSet};

use nalgebra::Point2;

use crate::depth::DepthMap;
use crate::{Intrinsics, Point3, Pose};

use super::dbscan::dbscan;
use super::voxel::{dedupe, set_iou, voxel_key, voxel_set, VoxelKey};
use super::{ShapeClass, ShapeConfig, ShapeError};

/// One predicted instance in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationInstance {
    pub view_id: String,
    pub shape_class: ShapeClass,
    /// Masked pixels as `(x, y)`.
    pub pixels: Vec<(u32, u32)>,
    pub confidence: f64,
}

/// A view's segmentation with the geometry needed to lift it to 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedView {
    pub view_id: String,
    /// World-from-camera.
    pub camera_pose: Pose,
    pub intrinsics: Intrinsics,
    pub depth: DepthMap,
    pub instances: Vec<SegmentationInstance>,
}

/// A labelled world-frame point set, from one view or merged across views.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePoints {
    pub shape_class: ShapeClass,
    pub points: Vec<Point3>,
    /// Confidence-weighted votes per class, indexed by [`ShapeClass::index`].
    pub votes: [f64; 2],
    pub views: Vec<String>,
}

impl InstancePoints {
    pub fn new(shape_class: ShapeClass, points: Vec<Point3>, confidence: f64, view_id: impl Into<String>) -> Self {
        let mut votes = [0.0; 2];
        votes[shape_class.index()] = confidence;
        Self {
            shape_class,
            points,
            votes,
            views: vec![view_id.into()],
        }
    }

    /// Majority of the weighted votes; ties go to the lower class index.
    fn relabel(&mut self) {
        self.shape_class = if self.votes[1] > self.votes[0] { ShapeClass::Cylinder } else { ShapeClass::Cuboid };
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let s = self.points.iter().fold(crate::Vector3::zeros(), |a, p| a + p.coords);
        Some(Point3::from(s / self.points.len() as f64))
    }
}

/// World points of the masked pixels that have valid depth.
pub fn unproject_instance(
    inst: &SegmentationInstance,
    depth: &DepthMap,
    camera_pose: &Pose,
    k: &Intrinsics,
) -> Result<Vec<Point3>, ShapeError> {
    let mut out = Vec::with_capacity(inst.pixels.len());
    for &(x, y) in &inst.pixels {
        if x >= depth.width || y >= depth.height {
            return Err(ShapeError::MaskOutOfBounds {
                x,
                y,
                width: depth.width,
                height: depth.height,
            });
        }
        if let Some(d) = depth.get(x, y) {
            let p = k.backproject(&Point2::new(x as f64, y as f64), d);
            out.push(camera_pose.transform_point(&p));
        }
    }
    if out.is_empty() {
        Err(ShapeError::EmptyUnprojection)
    } else {
        Ok(out)
    }
}

/// Keeps the largest DBSCAN cluster; `None` when every point is noise.
fn denoise(points: &[Point3], cfg: &ShapeConfig) -> Option<Vec<Point3>> {
    let r = dbscan(points, cfg.dbscan_eps, cfg.dbscan_min_pts);
    let c = r.largest()?;
    Some(r.members(c).into_iter().map(|i| points[i]).collect())
}

/// Greedy size-ordered suppression: keeps an instance only if its voxel-IoU
/// with every already kept one is below `threshold`. Candidates are visited
/// by descending point count (ties by input index); survivors keep their
/// input order.
pub fn nms_by_size(instances: &[InstancePoints], threshold: f64, voxel_size: f64) -> Vec<InstancePoints> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].points.len().cmp(&instances[a].points.len()).then(a.cmp(&b)));
    let sets: Vec<HashSet<VoxelKey>> = instances.iter().map(|i| voxel_set(&i.points, voxel_size)).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&j| set_iou(&sets[i], &sets[j]) < threshold) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| instances[i].clone()).collect()
}

/// Folds instances, in order, into merged sets.
///
/// Each incoming instance joins the set with the highest voxel overlap
/// (`cfg.merge_overlap`) if that reaches `cfg.overlap_threshold`, otherwise it
/// starts a new set; ties go to the older set. After
/// every step the touched set is deduplicated and reduced to its largest
/// DBSCAN cluster, then all sets pass through [`nms_by_size`]. A merge that
/// adds no new voxel-deduplicated point only updates the votes.
pub fn sequential_aggregate(instances: &[InstancePoints], cfg: &ShapeConfig) -> Vec<InstancePoints> {
    let mut sets: Vec<InstancePoints> = Vec::new();
    for inst in instances {
        let incoming = voxel_set(&inst.points, cfg.voxel_size);
        let mut best: Option<(usize, f64)> = None;
        for (j, s) in sets.iter().enumerate() {
            let overlap = cfg.merge_overlap.measure(&incoming, &voxel_set(&s.points, cfg.voxel_size));
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((j, overlap));
            }
        }
        match best {
            Some((j, overlap)) if overlap >= cfg.overlap_threshold => {
                let target = &mut sets[j];
                for c in 0..2 {
                    target.votes[c] += inst.votes[c];
                }
                for v in &inst.views {
                    if !target.views.contains(v) {
                        target.views.push(v.clone());
                    }
                }
                target.relabel();
                let existing: HashSet<VoxelKey> =
                    target.points.iter().map(|p| voxel_key(p, cfg.dedupe_voxel_size)).collect();
                let fresh: Vec<Point3> = dedupe(&inst.points, cfg.dedupe_voxel_size)
                    .into_iter()
                    .filter(|p| !existing.contains(&voxel_key(p, cfg.dedupe_voxel_size)))
                    .collect();
                if fresh.is_empty() {
                    continue;
                }
                let mut merged = target.points.clone();
                merged.extend(fresh);
                match denoise(&merged, cfg) {
                    Some(p) => target.points = p,
                    None => {
                        sets.remove(j);
                    }
                }
            }
            _ => {
                let mut fresh = inst.clone();
                fresh.points = dedupe(&inst.points, cfg.dedupe_voxel_size);
                fresh.relabel();
                if let Some(p) = denoise(&fresh.points, cfg) {
                    fresh.points = p;
                    sets.push(fresh);
                }
            }
        }
        sets = nms_by_size(&sets, cfg.nms_threshold, cfg.voxel_size);
    }
    sets
}

/// Unprojects every instance of every view, in order, and aggregates them.
pub fn multiview_vote(views: &[SegmentedView], cfg: &ShapeConfig) -> Vec<InstancePoints> {
    let mut lifted = Vec::new();
    for v in views {
        for inst in &v.instances {
            match unproject_instance(inst, &v.depth, &v.camera_pose, &v.intrinsics) {
                Ok(points) => lifted.push(InstancePoints::new(inst.shape_class, points, inst.confidence, &v.view_id)),
                Err(e) => log::debug!("view {}: instance skipped: {e}", v.view_id),
            }
        }
    }
    sequential_aggregate(&lifted, cfg)
}

/// Per-voxel class votes pooled over all views.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVoxelGrid {
    pub origin: Point3,
    pub voxel_size: f64,
    pub votes: BTreeMap<VoxelKey, [u32; 2]>,
}

impl LabeledVoxelGrid {
    /// Plurality label per voxel; ties go to the lower class index.
    pub fn labels(&self) -> BTreeMap<VoxelKey, ShapeClass> {
        self.votes
            .iter()
            .map(|(k, v)| (*k, if v[1] > v[0] { ShapeClass::Cylinder } else { ShapeClass::Cuboid }))
            .collect()
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Point3 {
        let s = self.voxel_size;
        Point3::new(
            self.origin.x + (key[0] as f64 + 0.5) * s,
            self.origin.y + (key[1] as f64 + 0.5) * s,
            self.origin.z + (key[2] as f64 + 0.5) * s,
        )
    }
}

/// Voxel-wise plurality labelling of all unprojected instance points, with
/// one vote per point.
pub fn majority_vote_baseline(instances: &[InstancePoints], voxel_size: f64) -> LabeledVoxelGrid {
    let mut votes: BTreeMap<VoxelKey, [u32; 2]> = BTreeMap::new();
    for inst in instances {
        for p in &inst.points {
            votes.entry(voxel_key(p, voxel_size)).or_insert([0, 0])[inst.shape_class.index()] += 1;
        }
    }
    LabeledVoxelGrid {
        origin: Point3::origin(),
        voxel_size,
        votes,
    }
}

/// Number of 26-connected components of equally labelled voxels.
pub fn count_fragments(grid: &LabeledVoxelGrid) -> usize {
    let labels = grid.labels();
    let mut seen: HashSet<VoxelKey> = HashSet::new();
    let mut count = 0;
    for (key, label) in &labels {
        if !seen.insert(*key) {
            continue;
        }
        count += 1;
        let mut stack = vec![*key];
        while let Some(k) = stack.pop() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let n = [k[0] + dx, k[1] + dy, k[2] + dz];
                        if labels.get(&n) == Some(label) && seen.insert(n) {
                            stack.push(n);
                        }
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::OverlapMeasure;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_points(rng: &mut ChaCha8Rng, center: [f64; 3], half: f64, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    center[0] + rng.random_range(-half..half),
                    center[1] + rng.random_range(-half..half),
                    center[2] + rng.random_range(-half..half),
                )
            })
            .collect()
    }

    #[test]
    fn same_object_in_three_views_merges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let insts: Vec<_> = (0..3)
            .map(|v| InstancePoints::new(ShapeClass::Cuboid, cube_points(&mut rng, [0.0; 3], 0.03, 3000), 0.9, format!("v{v}")))
            .collect();
        let out = sequential_aggregate(&insts, &ShapeConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].views.len(), 3);
    }

    #[test]
    fn disjoint_objects_stay_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let insts = vec![
            InstancePoints::new(ShapeClass::Cuboid, cube_points(&mut rng, [0.0; 3], 0.03, 3000), 0.9, "a"),
            InstancePoints::new(ShapeClass::Cylinder, cube_points(&mut rng, [0.3, 0.0, 0.0], 0.03, 3000), 0.9, "b"),
        ];
        let out = sequential_aggregate(&insts, &ShapeConfig::default());
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn chained_overlaps_merge_transitively() {
        // Slabs along x: A = [0, 3) cm, B = [0, 6) cm, C = [3, 6) cm.
        let slab = |x0: f64, n: usize| -> Vec<Point3> {
            let mut pts = Vec::new();
            for i in 0..n {
                for j in 0..15 {
                    for k in 0..15 {
                        pts.push(Point3::new(x0 + 0.001 + i as f64 * 0.002, 0.001 + j as f64 * 0.002, 0.001 + k as f64 * 0.002));
                    }
                }
            }
            pts
        };
        let (a, b, c) = (slab(0.0, 15), slab(0.0, 30), slab(0.03, 15));
        let size = 0.01;
        assert!((super::super::voxel::voxel_iou(&a, &b, size) - 0.5).abs() < 1e-12);
        assert!((super::super::voxel::voxel_iou(&b, &c, size) - 0.5).abs() < 1e-12);
        assert_eq!(super::super::voxel::voxel_iou(&a, &c, size), 0.0);
        for measure in [OverlapMeasure::Iou, OverlapMeasure::Coefficient] {
            let cfg = ShapeConfig { merge_overlap: measure, ..Default::default() };
            let insts = vec![
                InstancePoints::new(ShapeClass::Cuboid, a.clone(), 1.0, "a"),
                InstancePoints::new(ShapeClass::Cuboid, b.clone(), 1.0, "b"),
                InstancePoints::new(ShapeClass::Cylinder, c.clone(), 1.0, "c"),
            ];
            let out = sequential_aggregate(&insts, &cfg);
            assert_eq!(out.len(), 1, "{measure:?}");
            assert_eq!(out[0].views, ["a", "b", "c"]);
            assert_eq!(out[0].shape_class, ShapeClass::Cuboid);

            // C first starts its own set; B ties between both sets and joins
            // the older one, after which C is redundant.
            let insts = vec![insts[0].clone(), insts[2].clone(), insts[1].clone()];
            let out = sequential_aggregate(&insts, &cfg);
            assert_eq!(out.len(), 1, "{measure:?}");
            assert_eq!(out[0].views, ["a", "b"]);
            let max_x = out[0].points.iter().map(|p| p.x).fold(f64::MIN, f64::max);
            assert!(max_x > 0.055 && max_x < 0.06, "{max_x}");
        }
    }

    #[test]
    fn nms_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = InstancePoints::new(ShapeClass::Cuboid, cube_points(&mut rng, [0.0; 3], 0.05, 4000), 1.0, "a");
        let dup = big.clone();
        let out = nms_by_size(&[dup, big.clone()], 0.5, 0.01);
        assert_eq!(out.len(), 1);
        let far = InstancePoints::new(ShapeClass::Cuboid, cube_points(&mut rng, [1.0, 0.0, 0.0], 0.05, 100), 1.0, "b");
        assert_eq!(nms_by_size(&[far.clone(), big.clone()], 0.5, 0.01).len(), 2);
        // Small box occupying 60% of the large one's voxels.
        let inner: Vec<Point3> = big.points.iter().filter(|p| p.x < 0.01).copied().collect();
        let small = InstancePoints::new(ShapeClass::Cuboid, inner, 1.0, "c");
        let iou = super::super::voxel::voxel_iou(&small.points, &big.points, 0.01);
        assert!(iou >= 0.5, "{iou}");
        let out = nms_by_size(&[small.clone(), big.clone()], 0.5, 0.01);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].points.len(), big.points.len());
    }

    #[test]
    fn baseline_voting_rules() {
        let p = vec![Point3::new(0.005, 0.005, 0.005)];
        let one = majority_vote_baseline(&[InstancePoints::new(ShapeClass::Cylinder, p.clone(), 1.0, "a")], 0.01);
        assert_eq!(one.labels().values().next(), Some(&ShapeClass::Cylinder));
        let two = majority_vote_baseline(
            &[
                InstancePoints::new(ShapeClass::Cylinder, p.clone(), 1.0, "a"),
                InstancePoints::new(ShapeClass::Cylinder, p.clone(), 1.0, "b"),
                InstancePoints::new(ShapeClass::Cuboid, p.clone(), 1.0, "c"),
            ],
            0.01,
        );
        assert_eq!(two.labels().values().next(), Some(&ShapeClass::Cylinder));
        let tie = majority_vote_baseline(
            &[
                InstancePoints::new(ShapeClass::Cylinder, p.clone(), 1.0, "a"),
                InstancePoints::new(ShapeClass::Cuboid, p.clone(), 1.0, "b"),
            ],
            0.01,
        );
        assert_eq!(tie.labels().values().next(), Some(&ShapeClass::Cuboid));
        assert_eq!(count_fragments(&one), 1);
    }

    #[test]
    fn unprojection_errors() {
        let k = Intrinsics::new(100.0, 100.0, 5.0, 5.0, 10, 10).unwrap();
        let depth = DepthMap::invalid(10, 10);
        let inst = SegmentationInstance {
            view_id: "v".into(),
            shape_class: ShapeClass::Cuboid,
            pixels: vec![(1, 1)],
            confidence: 1.0,
        };
        assert_eq!(unproject_instance(&inst, &depth, &Pose::identity(), &k), Err(ShapeError::EmptyUnprojection));
        let oob = SegmentationInstance {
            pixels: vec![(10, 1)],
            ..inst
        };
        assert!(matches!(unproject_instance(&oob, &depth, &Pose::identity(), &k), Err(ShapeError::MaskOutOfBounds { .. })));
    }
}
