//! X-means clustering of rotations on the unit-quaternion double cover.
//!
//! Distances are geodesic rotation angles, so `q` and `−q` coincide. A
//! cluster's mean is the dominant eigenvector of `Σ q qᵀ`. Clusters are split
//! recursively by 2-means while the split raises the Bayesian information
//! criterion of the spherical-Gaussian model (one shared variance, three
//! degrees of freedom per rotation).

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector4};

use crate::geometry::rotation_geodesic;

const DIM: f64 = 3.0;
/// Rad²; keeps the likelihood finite for clusters of identical rotations.
const VARIANCE_FLOOR: f64 = 1e-12;
const MAX_LLOYD_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationClusters {
    pub means: Vec<UnitQuaternion<f64>>,
    /// Cluster index of each input rotation.
    pub assignment: Vec<usize>,
}

impl RotationClusters {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }
}

/// Rotation maximizing `Σ ⟨q, q_i⟩²`, sign-aligned with the first member.
pub fn quaternion_mean(rotations: &[UnitQuaternion<f64>]) -> UnitQuaternion<f64> {
    let mut acc = Matrix4::zeros();
    for q in rotations {
        let v = q.coords;
        acc += v * v.transpose();
    }
    let eig = acc.symmetric_eigen();
    let mut v: Vector4<f64> = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    if let Some(first) = rotations.first() {
        if v.dot(&first.coords) < 0.0 {
            v = -v;
        }
    }
    UnitQuaternion::from_quaternion(Quaternion::from(v))
}

/// Clusters `rotations` into at most `max_k` groups. Clusters are ordered by
/// their lowest member index.
pub fn xmeans_rotations(rotations: &[UnitQuaternion<f64>], max_k: usize) -> RotationClusters {
    if rotations.is_empty() {
        return RotationClusters {
            means: vec![],
            assignment: vec![],
        };
    }
    let total = rotations.len();
    let mut pending: std::collections::VecDeque<Vec<usize>> = std::collections::VecDeque::new();
    pending.push_back((0..total).collect());
    let mut done: Vec<Vec<usize>> = Vec::new();
    while let Some(members) = pending.pop_front() {
        if done.len() + pending.len() + 1 >= max_k.max(1) {
            done.push(members);
            continue;
        }
        match try_split(rotations, &members) {
            Some((a, b)) => {
                pending.push_back(a);
                pending.push_back(b);
            }
            None => done.push(members),
        }
    }
    done.sort_by_key(|m| m[0]);
    let mut assignment = vec![0; total];
    let mut means = Vec::with_capacity(done.len());
    for (c, members) in done.iter().enumerate() {
        for &i in members {
            assignment[i] = c;
        }
        let qs: Vec<_> = members.iter().map(|&i| rotations[i]).collect();
        means.push(quaternion_mean(&qs));
    }
    RotationClusters { means, assignment }
}

fn try_split(rotations: &[UnitQuaternion<f64>], members: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    if members.len() < 3 {
        return None;
    }
    let (a, b) = two_means(rotations, members)?;
    let parent = bic(rotations, &[members.to_vec()]);
    let children = bic(rotations, &[a.clone(), b.clone()]);
    (children > parent).then_some((a, b))
}

/// Lloyd iterations from a farthest-point seed pair; `None` if a side empties.
fn two_means(rotations: &[UnitQuaternion<f64>], members: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    let qs: Vec<_> = members.iter().map(|&i| rotations[i]).collect();
    let mean = quaternion_mean(&qs);
    let farthest_from = |c: &UnitQuaternion<f64>| {
        let mut best = 0;
        let mut best_d = -1.0;
        for (k, q) in qs.iter().enumerate() {
            let d = rotation_geodesic(q, c);
            if d > best_d {
                best = k;
                best_d = d;
            }
        }
        best
    };
    let s1 = farthest_from(&mean);
    let s2 = farthest_from(&qs[s1]);
    if rotation_geodesic(&qs[s1], &qs[s2]) == 0.0 {
        return None;
    }
    let mut centers = [qs[s1], qs[s2]];
    let mut labels = vec![usize::MAX; qs.len()];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let next: Vec<usize> = qs
            .iter()
            .map(|q| {
                if rotation_geodesic(q, &centers[1]) < rotation_geodesic(q, &centers[0]) {
                    1
                } else {
                    0
                }
            })
            .collect();
        if next == labels {
            break;
        }
        labels = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let group: Vec<_> = qs.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(q, _)| *q).collect();
            if group.is_empty() {
                return None;
            }
            *center = quaternion_mean(&group);
        }
    }
    let a: Vec<usize> = members.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(&m, _)| m).collect();
    let b: Vec<usize> = members.iter().zip(&labels).filter(|(_, &l)| l == 1).map(|(&m, _)| m).collect();
    if a.is_empty() || b.is_empty() {
        return None;
    }
    Some((a, b))
}

/// Bayesian information criterion of a partition (higher is better).
fn bic(rotations: &[UnitQuaternion<f64>], clusters: &[Vec<usize>]) -> f64 {
    let r: usize = clusters.iter().map(Vec::len).sum();
    let k = clusters.len();
    let rf = r as f64;
    let kf = k as f64;
    let mut sq = 0.0;
    for members in clusters {
        let qs: Vec<_> = members.iter().map(|&i| rotations[i]).collect();
        let mean = quaternion_mean(&qs);
        for q in &qs {
            let d = rotation_geodesic(q, &mean);
            sq += d * d;
        }
    }
    let variance = if r > k { (sq / (DIM * (rf - kf))).max(VARIANCE_FLOOR) } else { VARIANCE_FLOOR };
    let mut log_likelihood = 0.0;
    for members in clusters {
        let rn = members.len() as f64;
        log_likelihood += rn * rn.ln() - rn * rf.ln()
            - rn / 2.0 * (2.0 * std::f64::consts::PI).ln()
            - rn * DIM / 2.0 * variance.ln()
            - (rn - kf) / 2.0;
    }
    let params = (kf - 1.0) + DIM * kf + 1.0;
    log_likelihood - params / 2.0 * rf.ln()
}
