use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Pose;

use super::{Candidate, CandidateSet, FusionConfig, Provenance};

/// Independent stream seed for `(seed, instance, stage)`.
pub fn derive_seed(seed: u64, instance: u64, stage: u64) -> u64 {
    let mut z = seed ^ instance.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let mut draw = || -> f64 { StandardNormal.sample(rng) };
    Vector3::new(draw(), draw(), draw()) * sigma
}

fn perturb_rotation(pose: &Pose, sigma: f64, rng: &mut ChaCha8Rng) -> Pose {
    let omega = gaussian3(rng, sigma);
    Pose {
        rotation: UnitQuaternion::from_scaled_axis(omega) * pose.rotation,
        translation: pose.translation,
    }
}

/// Each base pose followed by `count` copies with axis-angle rotation noise
/// `N(0, σ²I)` and the base translation.
pub fn sample_rotation_candidates(base: &[Pose], count: usize, sigma: f64, seed: u64) -> CandidateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::with_capacity(base.len() * (count + 1));
    for pose in base {
        candidates.push(Candidate {
            pose: *pose,
            provenance: Provenance::Detected,
        });
        for _ in 0..count {
            candidates.push(Candidate {
                pose: perturb_rotation(pose, sigma, &mut rng),
                provenance: Provenance::RotationSampled,
            });
        }
    }
    CandidateSet { candidates }
}

/// `T*`, then translation-perturbed copies, then rotation-perturbed copies.
pub fn augment_stage2(t_star: &Pose, cfg: &FusionConfig, seed: u64) -> CandidateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_t = cfg.stage2_translation_sigma * cfg.translation_unit_scale;
    let mut candidates = Vec::with_capacity(1 + cfg.stage2_translation_samples + cfg.stage2_rotation_samples);
    candidates.push(Candidate {
        pose: *t_star,
        provenance: Provenance::Stage2Sampled,
    });
    for _ in 0..cfg.stage2_translation_samples {
        let pose = Pose {
            rotation: t_star.rotation,
            translation: t_star.translation + gaussian3(&mut rng, sigma_t),
        };
        candidates.push(Candidate {
            pose,
            provenance: Provenance::Stage2Sampled,
        });
    }
    for _ in 0..cfg.stage2_rotation_samples {
        candidates.push(Candidate {
            pose: perturb_rotation(t_star, cfg.stage2_rotation_sigma, &mut rng),
            provenance: Provenance::Stage2Sampled,
        });
    }
    CandidateSet { candidates }
}
