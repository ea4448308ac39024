//! Primitive-shape reconstruction from multi-view instance segmentations.
//!
//! Per-view instance masks are unprojected through depth maps, fused across
//! views in sequence by voxel overlap (with DBSCAN denoising and size-based
//! non-maximum suppression after every merge) and finally fitted with solid
//! cuboids or cylinders.

mod cuboid;
mod cylinder;
pub mod dbscan;
mod normals;
pub mod voxel;
mod voting;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Pose, Vector3};

pub use cuboid::fit_cuboid_ransac;
pub use cylinder::fit_cylinder_ransac;
pub use dbscan::{dbscan, DbscanResult};
pub use normals::estimate_normals;
pub use voting::{
    count_fragments, majority_vote_baseline, multiview_vote, nms_by_size, sequential_aggregate, unproject_instance,
    InstancePoints, LabeledVoxelGrid, SegmentationInstance, SegmentedView,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("no masked pixel has a valid depth")]
    EmptyUnprojection,
    #[error("mask pixel ({x}, {y}) lies outside the {width}x{height} image")]
    MaskOutOfBounds { x: u32, y: u32, width: u32, height: u32 },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("fit rejected: inlier ratio {ratio:.3} below the minimum")]
    FitRejected { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Cuboid,
    Cylinder,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 2] = [ShapeClass::Cuboid, ShapeClass::Cylinder];

    pub fn index(self) -> usize {
        match self {
            ShapeClass::Cuboid => 0,
            ShapeClass::Cylinder => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn other(self) -> Self {
        match self {
            ShapeClass::Cuboid => ShapeClass::Cylinder,
            ShapeClass::Cylinder => ShapeClass::Cuboid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    /// Box centred at `pose.translation` with edges along the pose axes.
    Cuboid { pose: Pose, extents: Vector3 },
    /// Cylinder centred at `pose.translation` with its axis along pose z.
    Cylinder { pose: Pose, radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveShape {
    pub kind: ShapeKind,
    pub inlier_count: usize,
    /// RMS point-to-surface distance of the inliers, meters.
    pub fit_rms: f64,
}

impl PrimitiveShape {
    pub fn class(&self) -> ShapeClass {
        match self.kind {
            ShapeKind::Cuboid { .. } => ShapeClass::Cuboid,
            ShapeKind::Cylinder { .. } => ShapeClass::Cylinder,
        }
    }

    pub fn pose(&self) -> &Pose {
        match &self.kind {
            ShapeKind::Cuboid { pose, .. } | ShapeKind::Cylinder { pose, .. } => pose,
        }
    }

    /// Unsigned distance from `p` to the shape's surface.
    pub fn surface_distance(&self, p: &crate::Point3) -> f64 {
        match &self.kind {
            ShapeKind::Cuboid { pose, extents } => {
                let local = pose.inverse().transform_point(p);
                cuboid::box_surface_distance(&local.coords, &(extents / 2.0))
            }
            ShapeKind::Cylinder { pose, radius, height } => {
                let local = pose.inverse().transform_point(p);
                cylinder::solid_cylinder_surface_distance(&local.coords, *radius, *height)
            }
        }
    }

    /// Whether `p` lies inside the solid or within `tolerance` of it.
    pub fn covers(&self, p: &crate::Point3, tolerance: f64) -> bool {
        let local = self.pose().inverse().transform_point(p).coords;
        match &self.kind {
            ShapeKind::Cuboid { extents, .. } => (0..3).all(|a| local[a].abs() <= extents[a] / 2.0 + tolerance),
            ShapeKind::Cylinder { radius, height, .. } => {
                local.xy().norm() <= radius + tolerance && local.z.abs() <= height / 2.0 + tolerance
            }
        }
    }
}

/// Voxel-set overlap used when merging instances into sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMeasure {
    Iou,
    /// Intersection over the smaller set; a partial view of an object still
    /// scores high against the larger accumulated set.
    Coefficient,
}

impl OverlapMeasure {
    pub fn measure(self, a: &HashSet<voxel::VoxelKey>, b: &HashSet<voxel::VoxelKey>) -> f64 {
        match self {
            OverlapMeasure::Iou => voxel::set_iou(a, b),
            OverlapMeasure::Coefficient => voxel::set_overlap_coefficient(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    /// Overlap needed to merge an instance into an existing set.
    pub overlap_threshold: f64,
    pub merge_overlap: OverlapMeasure,
    /// Meters; voxel size for overlap computations.
    pub voxel_size: f64,
    /// Meters; merged sets keep one point per voxel of this size.
    pub dedupe_voxel_size: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub nms_threshold: f64,
    /// Meters; point-to-surface distance for fit inliers.
    pub fit_tolerance: f64,
    pub min_inlier_ratio: f64,
    pub ransac_iterations: usize,
    pub normal_neighbors: usize,
    /// Degrees; half-width of the cuboid rotation search.
    pub cuboid_search_deg: f64,
    /// Degrees; step of the cuboid rotation search.
    pub cuboid_step_deg: f64,
    /// Lower extent quantile; the upper is its complement.
    pub extent_quantile: f64,
    pub min_fit_points: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.3,
            merge_overlap: OverlapMeasure::Coefficient,
            voxel_size: 0.01,
            dedupe_voxel_size: 0.003,
            dbscan_eps: 0.01,
            dbscan_min_pts: 10,
            nms_threshold: 0.5,
            fit_tolerance: 0.005,
            min_inlier_ratio: 0.5,
            ransac_iterations: 500,
            normal_neighbors: 12,
            cuboid_search_deg: 15.0,
            cuboid_step_deg: 1.5,
            extent_quantile: 0.01,
            min_fit_points: 20,
        }
    }
}

impl ShapeConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("dedupe_voxel_size", self.dedupe_voxel_size),
            ("dbscan_eps", self.dbscan_eps),
            ("fit_tolerance", self.fit_tolerance),
            ("cuboid_search_deg", self.cuboid_search_deg),
            ("cuboid_step_deg", self.cuboid_step_deg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("shapes.{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("overlap_threshold", self.overlap_threshold),
            ("nms_threshold", self.nms_threshold),
            ("min_inlier_ratio", self.min_inlier_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("shapes.{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..0.5).contains(&self.extent_quantile) {
            return Err("shapes.extent_quantile must lie in [0, 0.5)".into());
        }
        if self.dbscan_min_pts == 0 || self.ransac_iterations == 0 || self.normal_neighbors < 3 {
            return Err("shapes.dbscan_min_pts and ransac_iterations must be ≥ 1, normal_neighbors ≥ 3".into());
        }
        if self.min_fit_points < 4 {
            return Err("shapes.min_fit_points must be at least 4".into());
        }
        Ok(())
    }
}

/// Fits the primitive matching `class`.
pub fn fit_primitive(
    points: &[crate::Point3],
    class: ShapeClass,
    cfg: &ShapeConfig,
    seed: u64,
) -> Result<PrimitiveShape, ShapeError> {
    match class {
        ShapeClass::Cuboid => fit_cuboid_ransac(points, cfg, seed),
        ShapeClass::Cylinder => fit_cylinder_ransac(points, cfg, seed),
    }
}
