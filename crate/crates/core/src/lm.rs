//! Levenberg–Marquardt minimization of weighted reprojection error over a
//! single rigid pose, plus a small dense variant with a numeric Jacobian.
//!
//! The cost is `Σ w‖proj(view · T · p) − target‖²` summed over
//! [`ReprojectionTerm`]s, where `T` is the optimized pose. A term whose
//! target is missing, or whose point falls behind its camera under the
//! current pose, contributes the constant `w · behind_camera_penalty`.

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, Matrix6, Point2, Point3, Vector2, Vector6};

use crate::geometry::{CameraIntrinsics, RigidPose, MIN_DEPTH};
use crate::scalar::{cast, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionTerm<T: Real> {
    /// Point in the frame of the optimized pose's source (object frame).
    pub point: Point3<T>,
    /// Transform from the optimized pose's target frame into the camera.
    pub view: RigidPose<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub target: Option<Point2<T>>,
    pub weight: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions<T: Real> {
    pub max_iterations: usize,
    /// Stop when `‖∇cost‖∞` falls below this.
    pub gradient_tolerance: T,
    /// Stop when the proposed step norm falls below this.
    pub step_tolerance: T,
    pub initial_damping: T,
    /// Squared-pixel cost charged per behind-camera keypoint (times its weight).
    pub behind_camera_penalty: T,
}

impl<T: Real> Default for LmOptions<T> {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: cast(1e-9),
            step_tolerance: cast(1e-10),
            initial_damping: cast(1e-3),
            behind_camera_penalty: cast(1e4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Step,
    ZeroCost,
    MaxIterations,
    DampingOverflow,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport<T: Real> {
    pub pose: RigidPose<T>,
    pub initial_cost: T,
    pub final_cost: T,
    pub iterations: usize,
    /// Cost after each accepted step, in order.
    pub accepted_costs: Vec<T>,
    pub termination: Termination,
}

/// Weighted reprojection cost of `pose`.
pub fn reprojection_cost<T: Real>(pose: &RigidPose<T>, terms: &[ReprojectionTerm<T>], penalty: T) -> T {
    let mut cost = T::zero();
    for term in terms {
        let cam = term.view.transform_point(&pose.transform_point(&term.point));
        match (&term.target, term.intrinsics.project_camera_point(&cam)) {
            (Some(target), Ok(px)) => cost += term.weight * (px - target).norm_squared(),
            _ => cost += term.weight * penalty,
        }
    }
    cost
}

/// Residual `√w (proj − target)` and its Jacobian with respect to the
/// tangent increment of [`RigidPose::retract`]. `None` when the term is
/// penalized.
pub fn term_linearization<T: Real>(pose: &RigidPose<T>, term: &ReprojectionTerm<T>) -> Option<(Vector2<T>, Matrix2x6<T>)> {
    let target = term.target?;
    let rotated = pose.rotation * term.point.coords;
    let world = rotated + pose.translation;
    let cam = term.view.rotation * world + term.view.translation;
    if cam.z <= cast(MIN_DEPTH) {
        return None;
    }
    let k = &term.intrinsics;
    let (x, y, z) = (cam.x, cam.y, cam.z);
    let px = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);
    let sw = term.weight.max(T::zero()).sqrt();
    let residual = (px - target.coords) * sw;

    let zero = T::zero();
    let dproj = nalgebra::Matrix2x3::new(
        k.fx / z,
        zero,
        -k.fx * x / (z * z),
        zero,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let view_r = term.view.rotation_matrix();
    let skew = Matrix3::new(
        zero, -rotated.z, rotated.y, //
        rotated.z, zero, -rotated.x, //
        -rotated.y, rotated.x, zero,
    );
    let d_omega = view_r * (-skew);
    let mut jac = Matrix2x6::zeros();
    jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * d_omega * sw));
    jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dproj * view_r * sw));
    Some((residual, jac))
}

/// Normal equations `(JᵀJ, Jᵀr)` together with the cost at `pose`.
fn normal_equations<T: Real>(pose: &RigidPose<T>, terms: &[ReprojectionTerm<T>], penalty: T) -> (Matrix6<T>, Vector6<T>, T) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let mut cost = T::zero();
    for term in terms {
        match term_linearization(pose, term) {
            Some((r, j)) => {
                jtj += j.transpose() * j;
                jtr += j.transpose() * r;
                cost += r.norm_squared();
            }
            None => cost += term.weight * penalty,
        }
    }
    (jtj, jtr, cost)
}

/// Minimizes the weighted reprojection cost starting from `initial`.
///
/// Rejected steps increase the damping; the returned cost never exceeds the
/// initial one.
pub fn refine_pose<T: Real>(initial: &RigidPose<T>, terms: &[ReprojectionTerm<T>], options: &LmOptions<T>) -> LmReport<T> {
    let penalty = options.behind_camera_penalty;
    let mut pose = *initial;
    let (mut jtj, mut jtr, mut cost) = normal_equations(&pose, terms, penalty);
    let initial_cost = cost;
    let mut accepted_costs = Vec::new();
    let mut mu = options.initial_damping;
    let mut nu: T = cast(2.0);
    let two: T = cast(2.0);
    let mut iterations = 0;
    let termination = loop {
        if cost == T::zero() {
            break Termination::ZeroCost;
        }
        if (jtr * two).amax() < options.gradient_tolerance {
            break Termination::Gradient;
        }
        if iterations >= options.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let scale_floor = jtj.diagonal().amax() * cast(1e-12) + cast(1e-300);
        let mut damped = jtj;
        for i in 0..6 {
            damped[(i, i)] += mu * jtj[(i, i)].max(scale_floor);
        }
        let step = match damped.cholesky() {
            Some(chol) => chol.solve(&(-jtr)),
            None => {
                mu *= nu;
                nu *= two;
                if mu > cast(1e30) {
                    break Termination::DampingOverflow;
                }
                continue;
            }
        };
        if step.norm() < options.step_tolerance {
            break Termination::Step;
        }
        let candidate = pose.retract(&step);
        let (c_jtj, c_jtr, c_cost) = normal_equations(&candidate, terms, penalty);
        if c_cost < cost {
            let predicted = -(step.dot(&jtr) * two + (step.transpose() * jtj * step)[(0, 0)]);
            let rho = if predicted > T::zero() { (cost - c_cost) / predicted } else { T::one() };
            let t = two * rho - T::one();
            let factor = (T::one() - t * t * t).max(cast(1.0 / 3.0));
            mu *= factor;
            nu = two;
            pose = candidate;
            jtj = c_jtj;
            jtr = c_jtr;
            cost = c_cost;
            accepted_costs.push(cost);
        } else {
            mu *= nu;
            nu *= two;
            if mu > cast(1e30) {
                break Termination::DampingOverflow;
            }
        }
    };
    // Cost differences vanish into rounding well before the gradient does, so
    // finish with undamped steps accepted on gradient decrease.
    if termination != Termination::MaxIterations && cost > T::zero() {
        let slack = T::one() + cast::<T>(1e-12);
        for _ in 0..5 {
            let Some(chol) = jtj.cholesky() else { break };
            let step = chol.solve(&(-jtr));
            let candidate = pose.retract(&step);
            let (c_jtj, c_jtr, c_cost) = normal_equations(&candidate, terms, penalty);
            if !(c_jtr.amax() < jtr.amax() && c_cost <= cost * slack) {
                break;
            }
            pose = candidate;
            jtj = c_jtj;
            jtr = c_jtr;
            cost = c_cost;
        }
        if cost > initial_cost {
            pose = *initial;
            cost = initial_cost;
        }
    }
    LmReport {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
        accepted_costs,
        termination,
    }
}

/// Dense Levenberg–Marquardt over `f64` parameters with a central-difference
/// Jacobian. Returns the best parameters found and their squared residual norm.
pub fn minimize_dense<F>(x0: &DVector<f64>, residuals: F, max_iterations: usize) -> (DVector<f64>, f64)
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0.clone();
    let mut r = residuals(&x);
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let n = x.len();
    for _ in 0..max_iterations {
        let mut jac = DMatrix::zeros(r.len(), n);
        for k in 0..n {
            let h = 1e-7 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let col = (residuals(&xp) - residuals(&xm)) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        if jtr.amax() < 1e-15 {
            break;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let xn = &x + &step;
            let rn = residuals(&xn);
            let cn = rn.norm_squared();
            if cn < cost {
                let small = step.norm() < 1e-14 * (x.norm() + 1e-14);
                x = xn;
                r = rn;
                cost = cn;
                mu = (mu / 3.0).max(1e-15);
                improved = !small;
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (x, cost)
}
