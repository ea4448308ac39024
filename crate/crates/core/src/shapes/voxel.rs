//! Integer voxel keys and set overlap.

use std::collections::HashSet;

use crate::Point3;

pub type VoxelKey = [i64; 3];

pub fn voxel_key(p: &Point3, size: f64) -> VoxelKey {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

pub fn voxel_set(points: &[Point3], size: f64) -> HashSet<VoxelKey> {
    points.iter().map(|p| voxel_key(p, size)).collect()
}

/// `|A ∩ B| / |A ∪ B|`; zero when both are empty.
pub fn set_iou(a: &HashSet<VoxelKey>, b: &HashSet<VoxelKey>) -> f64 {
    let inter = a.iter().filter(|k| b.contains(*k)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `|A ∩ B| / min(|A|, |B|)`; zero when either is empty.
pub fn set_overlap_coefficient(a: &HashSet<VoxelKey>, b: &HashSet<VoxelKey>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if small.is_empty() {
        return 0.0;
    }
    small.iter().filter(|k| large.contains(*k)).count() as f64 / small.len() as f64
}

pub fn voxel_iou(a: &[Point3], b: &[Point3], size: f64) -> f64 {
    set_iou(&voxel_set(a, size), &voxel_set(b, size))
}

/// First point of each occupied voxel, in input order.
pub fn dedupe(points: &[Point3], size: f64) -> Vec<Point3> {
    let mut seen = HashSet::new();
    points.iter().filter(|p| seen.insert(voxel_key(p, size))).copied().collect()
}
