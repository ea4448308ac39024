//! Multi-view scene understanding for tabletop manipulation.
//!
//! Starting from posed RGB-derived inputs (a reconstructed point cloud,
//! per-view keypoint detections of known objects and per-view primitive-shape
//! segmentations), the crate provides:
//!
//! * [`fusion`]: multi-view fusion of keypoint detections into 6-DoF poses,
//! * [`depth`]: virtual depth maps rendered and refined from the point cloud,
//! * [`shapes`]: multi-view segmentation voting and cuboid/cylinder fitting,
//! * [`metrics`]: ADD, ADD-S, accuracy curves, F-score and detection rate,
//! * [`synth`]: a deterministic synthetic tabletop generator used as an oracle,
//! * [`io`] and [`cli`]: file formats, configuration and the `mvscene` tool.
//!
//! The geometric core ([`geometry`], [`pnp`], [`lm`], [`spatial`],
//! [`metrics`], [`shapes::dbscan`]) is generic over the scalar type through
//! [`Real`]; the pipeline stages work in `f64` through the aliases below.

pub mod cli;
pub mod depth;
pub mod detection;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod lm;
pub mod metrics;
pub mod pnp;
pub mod scalar;
pub mod shapes;
pub mod spatial;
pub mod synth;

pub use scalar::Real;

pub type Pose = geometry::RigidPose<f64>;
pub type Posef = geometry::RigidPose<f32>;
pub type Intrinsics = geometry::CameraIntrinsics<f64>;
pub type Intrinsicsf = geometry::CameraIntrinsics<f32>;
pub type Model = geometry::ObjectModel<f64>;
pub type Modelf = geometry::ObjectModel<f32>;
pub type Detection = detection::ViewDetection<f64>;
pub type Detectionf = detection::ViewDetection<f32>;
pub type Correspondence = pnp::Correspondence<f64>;
pub type KdTree = spatial::KdTree<f64>;

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;
