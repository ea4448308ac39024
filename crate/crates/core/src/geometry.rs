//! Rigid transforms, the pinhole camera and rotation distances.
//!
//! Conventions used throughout the crate:
//!
//! * Quaternions are stored by `nalgebra` in scalar-last order `[x, y, z, w]`.
//!   Serialized poses use scalar-first `[w, x, y, z]` (see [`crate::io`]).
//! * A pose `T` maps points from its source frame into its target frame,
//!   `T * p = R p + t`. Camera poses are world-from-camera.
//! * Pixel origin is the top-left corner, `u` grows right and `v` grows down.
//!   Integer pixel coordinates address pixel centres.
//! * Units are meters and radians.

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::scalar::{cast, Real};

/// Minimum camera-frame depth accepted by [`project`], meters.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    NonPositiveDepth { depth: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("object model needs at least 4 keypoints, got {got}")]
    TooFewKeypoints { got: usize },
}

/// An element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose<T: Real> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for RigidPose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidPose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, renormalizing the rotation.
    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    /// Builds a pose from a raw (not necessarily unit) quaternion.
    pub fn from_quaternion(q: Quaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(q),
            translation,
        }
    }

    /// Rotation given as an axis-angle vector (direction = axis, norm = angle).
    pub fn from_axis_angle(axis_angle: Vector3<T>, translation: Vector3<T>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rotation = renormalize(self.rotation.inverse());
        Self {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Applies a tangent-space increment `[ω, v]`: the rotation becomes
    /// `Exp(ω) · R` and the translation `t + v`.
    pub fn retract(&self, delta: &Vector6<T>) -> Self {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        Self {
            rotation: renormalize(UnitQuaternion::from_scaled_axis(omega) * self.rotation),
            translation: self.translation + v,
        }
    }

    /// The camera (or frame) origin expressed in the target frame.
    pub fn center(&self) -> Point3<T> {
        Point3::from(self.translation)
    }

    pub fn cast<U: Real>(&self) -> RigidPose<U> {
        let q = self.rotation.quaternion();
        RigidPose::from_quaternion(
            Quaternion::new(
                cast(crate::scalar::to_f64(q.w)),
                cast(crate::scalar::to_f64(q.i)),
                cast(crate::scalar::to_f64(q.j)),
                cast(crate::scalar::to_f64(q.k)),
            ),
            self.translation.map(|x| cast(crate::scalar::to_f64(x))),
        )
    }
}

fn renormalize<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Angle of the relative rotation between `a` and `b`, in `[0, π]`.
///
/// Equal to `2·acos(|⟨a, b⟩|)`; evaluated through `atan2` so it stays accurate
/// for nearly identical rotations.
pub fn rotation_geodesic<T: Real>(a: &UnitQuaternion<T>, b: &UnitQuaternion<T>) -> T {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    let two: T = cast(2.0);
    two * q.imag().norm().atan2(q.w.abs())
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let zero = T::zero();
        if !(self.fx > zero && self.fy > zero) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be positive".into()));
        }
        let w: T = cast(self.width as f64);
        let h: T = cast(self.height as f64);
        if !(self.cx >= zero && self.cx < w && self.cy >= zero && self.cy < h) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, p: &Point3<T>) -> Result<Point2<T>, GeometryError> {
        if p.z <= cast(MIN_DEPTH) {
            return Err(GeometryError::NonPositiveDepth {
                depth: crate::scalar::to_f64(p.z),
            });
        }
        Ok(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at the given z-depth along the ray through `pixel`.
    pub fn backproject(&self, pixel: &Point2<T>, depth: T) -> Point3<T> {
        Point3::new(
            (pixel.x - self.cx) * depth / self.fx,
            (pixel.y - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Ray direction with unit z component.
    pub fn ray(&self, pixel: &Point2<T>) -> Vector3<T> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, T::one())
    }

    /// Whether a continuous pixel coordinate rounds to a pixel inside the image.
    pub fn contains(&self, pixel: &Point2<T>) -> bool {
        let half: T = cast(0.5);
        let w: T = cast(self.width as f64);
        let h: T = cast(self.height as f64);
        pixel.x >= -half && pixel.y >= -half && pixel.x < w - half && pixel.y < h - half
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let z = T::zero();
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, T::one())
    }
}

/// Projects `p` through `pose` (point frame → camera frame) and `k`.
///
/// No clipping to the image bounds is applied.
pub fn project<T: Real>(
    pose: &RigidPose<T>,
    k: &CameraIntrinsics<T>,
    p: &Point3<T>,
) -> Result<Point2<T>, GeometryError> {
    k.project_camera_point(&pose.transform_point(p))
}

/// A known object: keypoints used for pose estimation plus vertices used for
/// metric evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel<T: Real> {
    pub class_id: String,
    pub keypoints: Vec<Point3<T>>,
    pub mesh_vertices: Vec<Point3<T>>,
    /// Selects ADD-S instead of ADD during evaluation.
    pub symmetric: bool,
}

impl<T: Real> ObjectModel<T> {
    pub fn new(
        class_id: impl Into<String>,
        keypoints: Vec<Point3<T>>,
        mesh_vertices: Vec<Point3<T>>,
        symmetric: bool,
    ) -> Result<Self, GeometryError> {
        if keypoints.len() < 4 {
            return Err(GeometryError::TooFewKeypoints { got: keypoints.len() });
        }
        Ok(Self {
            class_id: class_id.into(),
            keypoints,
            mesh_vertices,
            symmetric,
        })
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoints.len()
    }

    /// True when all keypoints lie on one plane (PnP then falls back to the
    /// planar linearization).
    pub fn keypoints_coplanar(&self) -> bool {
        let spread = principal_spread(&self.keypoints);
        spread[0] <= cast::<T>(1e-10) * spread[2].max(cast(1e-30))
    }
}

/// Eigenvalues (ascending) of the scatter matrix of `points` about their
/// centroid.
pub(crate) fn principal_spread<T: Real>(points: &[Point3<T>]) -> [T; 3] {
    if points.is_empty() {
        return [T::zero(); 3];
    }
    let n: T = cast(points.len() as f64);
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut vals = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals
}

/// Rotation taking the camera's optical axis (+z) toward `target` from `eye`,
/// with image-down (+y) as close as possible to `-up`.
pub fn look_at<T: Real>(eye: &Point3<T>, target: &Point3<T>, up: &Vector3<T>) -> RigidPose<T> {
    let z = (target - eye).normalize();
    let mut x = z.cross(up);
    if x.norm() < cast(1e-9) {
        x = z.cross(&Vector3::x());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
    RigidPose::new(UnitQuaternion::from_rotation_matrix(&rot), eye.coords)
}
