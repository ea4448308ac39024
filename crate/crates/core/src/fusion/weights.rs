use nalgebra::UnitQuaternion;

use crate::geometry::rotation_geodesic;
use crate::Detection;

use super::xmeans::RotationClusters;

/// `w_avg`: mean of all keypoint confidences, absent keypoints counting 0.
pub fn compute_avg_weight(d: &Detection) -> f64 {
    let n = d.keypoint_confidences.len();
    if n == 0 {
        return 0.0;
    }
    d.keypoint_confidences.iter().sum::<f64>() / n as f64
}

/// `w_resample = exp(−θ²/2σ²)` with `θ` the angle between a detection's
/// cluster mean and `r_star`; one entry per clustered rotation.
pub fn compute_resample_weights(clusters: &RotationClusters, r_star: &UnitQuaternion<f64>, sigma: f64) -> Vec<f64> {
    let per_cluster: Vec<f64> = clusters
        .means
        .iter()
        .map(|m| {
            let theta = rotation_geodesic(m, r_star);
            (-theta * theta / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    clusters.assignment.iter().map(|&c| per_cluster[c]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Intrinsics, Pose};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn detection(conf: Vec<f64>) -> Detection {
        let px = conf.iter().map(|_| Some(crate::Point2::new(1.0, 1.0))).collect();
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        Detection::new("v", "c", px, conf, Pose::identity(), k).unwrap()
    }

    #[test]
    fn average_weight_examples() {
        assert_eq!(compute_avg_weight(&detection(vec![1.0; 9])), 1.0);
        assert_eq!(compute_avg_weight(&detection(vec![1.0, 0.0, 0.5, 0.5])), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut acc = 0.0;
            for v in &c {
                acc += v;
            }
            let expected = acc / 9.0;
            assert!((compute_avg_weight(&detection(c)) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn resample_weight_examples() {
        let r_star = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3);
        let sigma = 0.1;
        let off_sigma = r_star * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), sigma);
        let off_90 = r_star * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
        let clusters = RotationClusters {
            means: vec![r_star, off_sigma, off_90],
            assignment: vec![0, 1, 2, 2],
        };
        let w = compute_resample_weights(&clusters, &r_star, sigma);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert!(w[2] < 1e-5 * w[0]);
        assert_eq!(w[2], w[3]);
    }
}
