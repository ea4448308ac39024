//! Perspective-n-point pose recovery and leave-one-out keypoint consistency.
//!
//! [`solve_pnp`] initializes with an EPnP control-point linearization (four
//! control points, or three for planar models) and refines the weighted
//! reprojection error with [`crate::lm::refine_pose`]. Poses returned here are
//! camera-from-object.

use nalgebra::{DMatrix, DVector, Matrix3, Point2, Point3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::detection::ViewDetection;
use crate::geometry::{principal_spread, project, CameraIntrinsics, ObjectModel, RigidPose};
use crate::lm::{refine_pose, LmOptions, LmReport, ReprojectionTerm};
use crate::scalar::{cast, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Real> {
    pub model_point: Point3<T>,
    pub image_point: Point2<T>,
    pub weight: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution<T: Real> {
    /// Camera-from-object pose.
    pub pose: RigidPose<T>,
    /// Weighted RMS reprojection error in pixels (weights normalized to sum 1).
    pub rms_px: T,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PnpError<T: Real> {
    #[error("need at least 4 correspondences, got {got}")]
    TooFewCorrespondences { got: usize },
    #[error("correspondence weights must be finite, nonnegative and not all zero")]
    InvalidWeights,
    #[error("model points are degenerate (collinear or coincident)")]
    DegenerateConfiguration,
    /// Refinement hit its iteration cap; `best` is usable but low-confidence.
    #[error("pose refinement did not converge")]
    NoConvergence { best: Box<PnpSolution<T>> },
    #[error("need at least 5 visible keypoints for the consistency weight, got {visible}")]
    TooFewKeypoints { visible: usize },
}

impl<T: Real> PnpError<T> {
    /// The best-so-far solution carried by [`PnpError::NoConvergence`].
    pub fn best_effort(self) -> Option<PnpSolution<T>> {
        match self {
            PnpError::NoConvergence { best } => Some(*best),
            _ => None,
        }
    }
}

/// Recovers the camera-from-object pose minimizing weighted squared
/// reprojection error.
///
/// When `initial_guess` is given, refinement starts from whichever of the
/// guess and the linear initialization has lower cost, so the result never
/// exceeds the guess's residual.
pub fn solve_pnp<T: Real>(
    correspondences: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    initial_guess: Option<&RigidPose<T>>,
) -> Result<PnpSolution<T>, PnpError<T>> {
    solve_pnp_with(correspondences, k, initial_guess, &LmOptions::default())
}

pub fn solve_pnp_with<T: Real>(
    correspondences: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    initial_guess: Option<&RigidPose<T>>,
    options: &LmOptions<T>,
) -> Result<PnpSolution<T>, PnpError<T>> {
    let n = correspondences.len();
    if n < 4 {
        return Err(PnpError::TooFewCorrespondences { got: n });
    }
    let mut total = T::zero();
    for c in correspondences {
        if !(c.weight >= T::zero()) || !c.weight.is_finite() {
            return Err(PnpError::InvalidWeights);
        }
        total += c.weight;
    }
    if total <= T::zero() {
        return Err(PnpError::InvalidWeights);
    }
    let points: Vec<Point3<T>> = correspondences.iter().map(|c| c.model_point).collect();
    let spread = principal_spread(&points);
    if spread[1] <= cast::<T>(1e-12) * spread[2] || spread[2] <= T::zero() {
        return Err(PnpError::DegenerateConfiguration);
    }

    let terms: Vec<ReprojectionTerm<T>> = correspondences
        .iter()
        .map(|c| ReprojectionTerm {
            point: c.model_point,
            view: RigidPose::identity(),
            intrinsics: *k,
            target: Some(c.image_point),
            weight: c.weight / total,
        })
        .collect();

    let mut starts = epnp(correspondences, k);
    let flipped: Vec<RigidPose<T>> = starts.iter().map(|p| depth_flip(p, &points)).collect();
    starts.extend(flipped);
    if let Some(g) = initial_guess {
        starts.push(*g);
    }
    if starts.is_empty() {
        return Err(PnpError::DegenerateConfiguration);
    }
    let mut best: Option<LmReport<T>> = None;
    for start in &starts {
        let report = refine_pose(start, &terms, options);
        if best.as_ref().map_or(true, |b| report.final_cost < b.final_cost) {
            best = Some(report);
        }
    }
    let report = best.expect("at least one start");
    let solution = PnpSolution {
        pose: report.pose,
        rms_px: report.final_cost.max(T::zero()).sqrt(),
        iterations: report.iterations,
    };
    if report.termination.converged() {
        Ok(solution)
    } else {
        Err(PnpError::NoConvergence { best: Box::new(solution) })
    }
}

/// Control-point linearization. Returns one candidate pose per null-space
/// dimensionality that yields a valid rotation, best linear cost first.
fn epnp<T: Real>(corrs: &[Correspondence<T>], k: &CameraIntrinsics<T>) -> Vec<RigidPose<T>> {
    let n = corrs.len();
    let nf: T = cast(n as f64);
    let mean = corrs.iter().fold(Vector3::zeros(), |acc, c| acc + c.model_point.coords) / nf;
    let mut cov = Matrix3::zeros();
    for c in corrs {
        let d = c.model_point.coords - mean;
        cov += d * d.transpose();
    }
    cov /= nf;
    let eig = cov.symmetric_eigen();
    let mut axes: Vec<(T, Vector3<T>)> = (0..3).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned())).collect();
    axes.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let planar = axes[2].0 <= cast::<T>(1e-6) * axes[0].0;
    let used = if planar { 2 } else { 3 };
    let nc = used + 1;

    let mut control_world = vec![mean];
    let mut scales = Vec::with_capacity(used);
    for (lambda, axis) in axes.iter().take(used) {
        let s = lambda.max(T::zero()).sqrt();
        scales.push(s);
        control_world.push(mean + axis * s);
    }
    let alphas: Vec<Vec<T>> = corrs
        .iter()
        .map(|c| {
            let d = c.model_point.coords - mean;
            let mut a = vec![T::zero(); nc];
            let mut rest = T::one();
            for j in 0..used {
                let aj = d.dot(&axes[j].1) / scales[j];
                a[j + 1] = aj;
                rest -= aj;
            }
            a[0] = rest;
            a
        })
        .collect();

    let cols = 3 * nc;
    let mut m = DMatrix::<T>::zeros(2 * n, cols);
    for (i, (c, a)) in corrs.iter().zip(&alphas).enumerate() {
        let sw = c.weight.sqrt();
        let (u, v) = (c.image_point.x, c.image_point.y);
        for j in 0..nc {
            m[(2 * i, 3 * j)] = a[j] * k.fx * sw;
            m[(2 * i, 3 * j + 2)] = a[j] * (k.cx - u) * sw;
            m[(2 * i + 1, 3 * j + 1)] = a[j] * k.fy * sw;
            m[(2 * i + 1, 3 * j + 2)] = a[j] * (k.cy - v) * sw;
        }
    }
    let mtm = m.transpose() * &m;
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap_or(std::cmp::Ordering::Equal));
    let null_dim = if planar { 3 } else { 4 };
    let basis: Vec<DVector<T>> = order.iter().take(null_dim).map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let pairs: Vec<(usize, usize)> = (0..nc).flat_map(|a| ((a + 1)..nc).map(move |b| (a, b))).collect();
    let world_d2: Vec<T> = pairs.iter().map(|&(a, b)| (control_world[a] - control_world[b]).norm_squared()).collect();
    // diff[p][i]: difference of control points a and b in basis vector i.
    let diff: Vec<Vec<Vector3<T>>> = pairs
        .iter()
        .map(|&(a, b)| {
            basis
                .iter()
                .map(|v| Vector3::new(v[3 * a] - v[3 * b], v[3 * a + 1] - v[3 * b + 1], v[3 * a + 2] - v[3 * b + 2]))
                .collect()
        })
        .collect();

    let max_n = if planar { 2 } else { 3 };
    let mut found: Vec<(T, RigidPose<T>)> = Vec::new();
    for dims in 1..=max_n {
        let Some(mut betas) = initial_betas(&diff, &world_d2, dims) else {
            continue;
        };
        betas.resize(null_dim, T::zero());
        refine_betas(&diff, &world_d2, &mut betas);
        let Some(pose) = pose_from_betas(corrs, &alphas, &basis, &betas, nc) else {
            continue;
        };
        found.push((linear_cost(corrs, k, &pose), pose));
    }
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    found.into_iter().map(|(_, p)| p).collect()
}

/// Linearized estimate of the first `dims` null-space coefficients from the
/// control-point distance constraints.
fn initial_betas<T: Real>(diff: &[Vec<Vector3<T>>], world_d2: &[T], dims: usize) -> Option<Vec<T>> {
    let products: Vec<(usize, usize)> = (0..dims).flat_map(|i| (i..dims).map(move |j| (i, j))).collect();
    if products.len() > world_d2.len() {
        return None;
    }
    let mut l = DMatrix::<T>::zeros(world_d2.len(), products.len());
    for (p, d) in diff.iter().enumerate() {
        for (c, &(i, j)) in products.iter().enumerate() {
            let two: T = if i == j { T::one() } else { cast(2.0) };
            l[(p, c)] = d[i].dot(&d[j]) * two;
        }
    }
    let rho = DVector::from_column_slice(world_d2);
    let sol = l.svd(true, true).solve(&rho, cast(1e-14)).ok()?;
    let b11 = sol[0];
    if b11 == T::zero() || !b11.is_finite() {
        return None;
    }
    let b1 = b11.abs().sqrt();
    let mut betas = vec![b1];
    for i in 1..dims {
        // Product b_0 b_i sits at column i of the upper-triangular ordering.
        betas.push(sol[i] / b1);
    }
    Some(betas)
}

fn refine_betas<T: Real>(diff: &[Vec<Vector3<T>>], world_d2: &[T], betas: &mut [T]) {
    let dims = betas.len();
    for _ in 0..10 {
        let mut jac = DMatrix::<T>::zeros(world_d2.len(), dims);
        let mut res = DVector::<T>::zeros(world_d2.len());
        for (p, d) in diff.iter().enumerate() {
            let v = d.iter().zip(betas.iter()).fold(Vector3::zeros(), |acc, (di, &b)| acc + di * b);
            res[p] = v.norm_squared() - world_d2[p];
            for i in 0..dims {
                jac[(p, i)] = v.dot(&d[i]) * cast(2.0);
            }
        }
        let Ok(step) = jac.clone().svd(true, true).solve(&(-&res), cast(1e-14)) else {
            return;
        };
        for (b, s) in betas.iter_mut().zip(step.iter()) {
            *b += *s;
        }
        if step.norm() < cast(1e-14) {
            return;
        }
    }
}

fn pose_from_betas<T: Real>(
    corrs: &[Correspondence<T>],
    alphas: &[Vec<T>],
    basis: &[DVector<T>],
    betas: &[T],
    nc: usize,
) -> Option<RigidPose<T>> {
    let mut x = DVector::<T>::zeros(3 * nc);
    for (v, &b) in basis.iter().zip(betas) {
        x += v * b;
    }
    let controls: Vec<Vector3<T>> = (0..nc).map(|j| Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2])).collect();
    let mut cam: Vec<Vector3<T>> = alphas
        .iter()
        .map(|a| controls.iter().zip(a).fold(Vector3::zeros(), |acc, (c, &w)| acc + c * w))
        .collect();
    let mean_z = cam.iter().fold(T::zero(), |acc, p| acc + p.z);
    if mean_z < T::zero() {
        for p in &mut cam {
            *p = -*p;
        }
    }
    let world: Vec<Vector3<T>> = corrs.iter().map(|c| c.model_point.coords).collect();
    absolute_orientation(&world, &cam)
}

/// Counterpart of `pose` under the depth-reversal ambiguity of a nearly
/// planar point set: mirrors the points along the viewing ray through their
/// centroid and mirrors back across the set's thinnest axis, so in-plane
/// points project almost identically under weak perspective.
fn depth_flip<T: Real>(pose: &RigidPose<T>, points: &[Point3<T>]) -> RigidPose<T> {
    let nf: T = cast(points.len() as f64);
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / nf;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let thin = eig.eigenvalues.imin();
    let e = eig.eigenvectors.column(thin).into_owned();
    let c = pose.transform_point(&Point3::from(centroid)).coords;
    let Some(v) = c.try_normalize(T::default_epsilon()) else {
        return *pose;
    };
    let two: T = cast(2.0);
    let s = Matrix3::identity() - v * v.transpose() * two;
    let m = Matrix3::identity() - e * e.transpose() * two;
    let r = s * pose.rotation_matrix() * m;
    let rot = UnitQuaternion::from_matrix(&r);
    RigidPose::new(rot, c - rot * centroid)
}

/// Least-squares rigid transform mapping `src` onto `dst`.
pub(crate) fn absolute_orientation<T: Real>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Option<RigidPose<T>> {
    let n: T = cast(src.len() as f64);
    let ms = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let md = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - md) * (s - ms).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    let r = u * fix * vt;
    let rot = UnitQuaternion::from_matrix(&r);
    let t = md - rot * ms;
    let pose = RigidPose::new(rot, t);
    if pose.translation.iter().all(|v| v.is_finite()) {
        Some(pose)
    } else {
        None
    }
}

fn linear_cost<T: Real>(corrs: &[Correspondence<T>], k: &CameraIntrinsics<T>, pose: &RigidPose<T>) -> T {
    corrs.iter().fold(T::zero(), |acc, c| match project(pose, k, &c.model_point) {
        Ok(px) => acc + c.weight * (px - c.image_point).norm_squared(),
        Err(_) => acc + c.weight * cast(1e12),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyConfig<T: Real> {
    /// Spread scale of the exponential spread→weight map, pixels.
    pub tau_px: T,
    /// Weight assigned by callers when the detection has too few keypoints.
    pub weight_floor: T,
}

impl<T: Real> Default for ConsistencyConfig<T> {
    fn default() -> Self {
        Self {
            tau_px: cast(5.0),
            weight_floor: cast(0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport<T: Real> {
    pub weight: T,
    /// Mean over keypoints of the mean leave-one-out projection spread, pixels.
    pub mean_spread_px: T,
    /// Camera-from-object pose from all visible keypoints.
    pub full_pose: RigidPose<T>,
}

/// `exp(−spread / τ)`.
pub fn weight_from_spread<T: Real>(spread_px: T, tau_px: T) -> T {
    (-spread_px / tau_px).exp()
}

/// Keypoint-stability weight of a detection, in `(0, 1]`.
///
/// Solves PnP on every leave-one-out subset of the visible keypoints (unit
/// weights) and measures how far each subset pose moves the projected
/// keypoints relative to the all-keypoint pose.
pub fn pnp_consistency_weight<T: Real>(
    detection: &ViewDetection<T>,
    model: &ObjectModel<T>,
    config: &ConsistencyConfig<T>,
) -> Result<T, PnpError<T>> {
    pnp_consistency(detection, model, config).map(|r| r.weight)
}

pub fn pnp_consistency<T: Real>(
    detection: &ViewDetection<T>,
    model: &ObjectModel<T>,
    config: &ConsistencyConfig<T>,
) -> Result<ConsistencyReport<T>, PnpError<T>> {
    let k = &detection.intrinsics;
    let visible: Vec<Correspondence<T>> = detection
        .correspondences(model)
        .into_iter()
        .map(|c| Correspondence { weight: T::one(), ..c })
        .collect();
    if visible.len() < 5 {
        return Err(PnpError::TooFewKeypoints { visible: visible.len() });
    }
    let full = solve_or_best(&visible, k, None)?;
    let reference: Vec<Option<Point2<T>>> = visible.iter().map(|c| project(&full, k, &c.model_point).ok()).collect();

    let miss_px: T = cast(1e3);
    let mut spread = vec![T::zero(); visible.len()];
    for left_out in 0..visible.len() {
        let subset: Vec<Correspondence<T>> = visible
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != left_out)
            .map(|(_, c)| *c)
            .collect();
        let sub_pose = solve_or_best(&subset, k, Some(&full)).ok();
        for (j, c) in visible.iter().enumerate() {
            let d = match (&sub_pose, &reference[j]) {
                (Some(p), Some(r)) => match project(p, k, &c.model_point) {
                    Ok(px) => (px - r).norm(),
                    Err(_) => miss_px,
                },
                _ => miss_px,
            };
            spread[j] += d;
        }
    }
    let nv: T = cast(visible.len() as f64);
    let mean_spread = spread.iter().fold(T::zero(), |a, s| a + *s / nv) / nv;
    Ok(ConsistencyReport {
        weight: weight_from_spread(mean_spread, config.tau_px),
        mean_spread_px: mean_spread,
        full_pose: full,
    })
}

fn solve_or_best<T: Real>(
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    guess: Option<&RigidPose<T>>,
) -> Result<RigidPose<T>, PnpError<T>> {
    match solve_pnp(corrs, k, guess) {
        Ok(s) => Ok(s.pose),
        Err(PnpError::NoConvergence { best }) => Ok(best.pose),
        Err(e) => Err(e),
    }
}
