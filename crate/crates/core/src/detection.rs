//! Per-view keypoint detections of a known object.

use nalgebra::Point2;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, ObjectModel, RigidPose};
use crate::pnp::Correspondence;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("detection {view_id}: {pixels} keypoint pixels but {confidences} confidences")]
    LengthMismatch {
        view_id: String,
        pixels: usize,
        confidences: usize,
    },
    #[error("detection {view_id}: confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { view_id: String, value: f64 },
    #[error("detection {view_id}: {got} keypoints, model {class_id} has {expected}")]
    ModelMismatch {
        view_id: String,
        class_id: String,
        got: usize,
        expected: usize,
    },
}

/// One object detection in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDetection<T: Real> {
    pub view_id: String,
    pub class_id: String,
    /// Per-keypoint pixel location, `None` when the keypoint was not detected.
    pub keypoint_pixels: Vec<Option<Point2<T>>>,
    /// Per-keypoint confidence in `[0, 1]`; zero wherever the pixel is absent.
    pub keypoint_confidences: Vec<T>,
    /// World-from-camera pose of the capturing camera.
    pub camera_pose: RigidPose<T>,
    pub intrinsics: CameraIntrinsics<T>,
}

impl<T: Real> ViewDetection<T> {
    /// Validates lengths and ranges and zeroes confidences of absent keypoints.
    pub fn new(
        view_id: impl Into<String>,
        class_id: impl Into<String>,
        keypoint_pixels: Vec<Option<Point2<T>>>,
        mut keypoint_confidences: Vec<T>,
        camera_pose: RigidPose<T>,
        intrinsics: CameraIntrinsics<T>,
    ) -> Result<Self, DetectionError> {
        let view_id = view_id.into();
        if keypoint_pixels.len() != keypoint_confidences.len() {
            return Err(DetectionError::LengthMismatch {
                view_id,
                pixels: keypoint_pixels.len(),
                confidences: keypoint_confidences.len(),
            });
        }
        for (px, c) in keypoint_pixels.iter().zip(keypoint_confidences.iter_mut()) {
            if !(*c >= T::zero() && *c <= T::one()) {
                return Err(DetectionError::ConfidenceOutOfRange {
                    view_id,
                    value: crate::scalar::to_f64(*c),
                });
            }
            if px.is_none() {
                *c = T::zero();
            }
        }
        Ok(Self {
            view_id,
            class_id: class_id.into(),
            keypoint_pixels,
            keypoint_confidences,
            camera_pose,
            intrinsics,
        })
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoint_pixels.len()
    }

    pub fn visible_count(&self) -> usize {
        self.keypoint_pixels.iter().filter(|p| p.is_some()).count()
    }

    pub fn check_model(&self, model: &ObjectModel<T>) -> Result<(), DetectionError> {
        if self.keypoint_count() != model.keypoint_count() {
            return Err(DetectionError::ModelMismatch {
                view_id: self.view_id.clone(),
                class_id: model.class_id.clone(),
                got: self.keypoint_count(),
                expected: model.keypoint_count(),
            });
        }
        Ok(())
    }

    /// Correspondences of the visible keypoints, weighted by confidence.
    pub fn correspondences(&self, model: &ObjectModel<T>) -> Vec<Correspondence<T>> {
        self.keypoint_pixels
            .iter()
            .zip(&self.keypoint_confidences)
            .zip(&model.keypoints)
            .filter_map(|((px, &c), kp)| {
                px.map(|image_point| Correspondence {
                    model_point: *kp,
                    image_point,
                    weight: c,
                })
            })
            .collect()
    }
}
