use nalgebra::{DVector, UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lm::minimize_dense;
use crate::{Point3, Pose, Vector3};

use super::normals::estimate_normals;
use super::{PrimitiveShape, ShapeConfig, ShapeError, ShapeKind};

/// Pairs whose normals differ by less than this (sine) give no stable axis.
const MIN_NORMAL_SINE: f64 = 0.1;

/// Distance from a local point to the surface of the solid cylinder of the
/// given radius and height centred at the origin with axis z.
pub(crate) fn solid_cylinder_surface_distance(p: &Vector3, radius: f64, height: f64) -> f64 {
    let dr = p.xy().norm() - radius;
    let dz = p.z.abs() - height / 2.0;
    if dr <= 0.0 && dz <= 0.0 {
        (-dr).min(-dz)
    } else {
        Vector2::new(dr.max(0.0), dz.max(0.0)).norm()
    }
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    point: Vector3,
    dir: Vector3,
    radius: f64,
}

impl Axis {
    fn lateral_distance(&self, p: &Point3) -> f64 {
        let d = p.coords - self.point;
        ((d - self.dir * d.dot(&self.dir)).norm() - self.radius).abs()
    }
}

fn basis(dir: &Vector3) -> (Vector3, Vector3) {
    let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = dir.cross(&helper).normalize();
    (u, dir.cross(&u))
}

/// Axis through the intersection of the two normal lines projected onto the
/// plane orthogonal to `n1 × n2`.
fn hypothesis(p1: &Point3, n1: &Vector3, p2: &Point3, n2: &Vector3, max_radius: f64, tol: f64) -> Option<Axis> {
    let a = n1.cross(n2);
    if a.norm() < MIN_NORMAL_SINE {
        return None;
    }
    let dir = a.normalize();
    let (u, v) = basis(&dir);
    let q1 = Vector2::new(p1.coords.dot(&u), p1.coords.dot(&v));
    let q2 = Vector2::new(p2.coords.dot(&u), p2.coords.dot(&v));
    let m1 = Vector2::new(n1.dot(&u), n1.dot(&v));
    let m2 = Vector2::new(n2.dot(&u), n2.dot(&v));
    // q1 + s m1 = q2 + t m2
    let det = m1.x * (-m2.y) - m1.y * (-m2.x);
    if det.abs() < 1e-12 {
        return None;
    }
    let rhs = q2 - q1;
    let s = (rhs.x * (-m2.y) - rhs.y * (-m2.x)) / det;
    let c = q1 + m1 * s;
    let (r1, r2) = ((q1 - c).norm(), (q2 - c).norm());
    if (r1 - r2).abs() > 2.0 * tol {
        return None;
    }
    let radius = 0.5 * (r1 + r2);
    if !(radius > 0.0 && radius <= max_radius) {
        return None;
    }
    Some(Axis {
        point: u * c.x + v * c.y,
        dir,
        radius,
    })
}

fn refine(axis: Axis, points: &[Point3]) -> Axis {
    let (u, v) = basis(&axis.dir);
    let decode = |x: &DVector<f64>| -> Axis {
        Axis {
            dir: (axis.dir + u * x[0] + v * x[1]).normalize(),
            point: axis.point + u * x[2] + v * x[3],
            radius: x[4],
        }
    };
    let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, axis.radius]);
    let (x, _) = minimize_dense(
        &x0,
        |x| {
            let a = decode(x);
            DVector::from_iterator(
                points.len(),
                points.iter().map(|p| {
                    let d = p.coords - a.point;
                    (d - a.dir * d.dot(&a.dir)).norm() - a.radius
                }),
            )
        },
        50,
    );
    decode(&x)
}

/// RANSAC cylinder fit from point pairs with PCA normals, followed by
/// least-squares refinement of axis and radius.
pub fn fit_cylinder_ransac(points: &[Point3], cfg: &ShapeConfig, seed: u64) -> Result<PrimitiveShape, ShapeError> {
    let n = points.len();
    if n < cfg.min_fit_points {
        return Err(ShapeError::TooFewPoints {
            needed: cfg.min_fit_points,
            got: n,
        });
    }
    let tol = cfg.fit_tolerance;
    let (lo, hi) = points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(&p.coords), hi.sup(&p.coords)),
    );
    let max_radius = 0.5 * (hi - lo).norm();
    let normals = estimate_normals(points, cfg.normal_neighbors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best: Option<(usize, Axis)> = None;
    for _ in 0..cfg.ransac_iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n - 1);
        let j = if j >= i { j + 1 } else { j };
        let Some(h) = hypothesis(&points[i], &normals[i], &points[j], &normals[j], max_radius, tol) else {
            continue;
        };
        let count = points.iter().filter(|p| h.lateral_distance(p) < tol).count();
        if best.map_or(true, |(c, _)| count > c) {
            best = Some((count, h));
        }
    }
    let Some((_, mut axis)) = best else {
        return Err(ShapeError::FitRejected { ratio: 0.0 });
    };

    // Later rounds drop points within `tol` of the ends so cap samples near
    // the rim cannot bias the lateral fit.
    for round in 0..3 {
        let mut inliers: Vec<Point3> = points.iter().filter(|p| axis.lateral_distance(p) < tol).copied().collect();
        if round > 0 {
            let z: Vec<f64> = inliers.iter().map(|p| (p.coords - axis.point).dot(&axis.dir)).collect();
            let (zmin, zmax) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            inliers = inliers
                .into_iter()
                .zip(z)
                .filter(|(_, v)| *v > zmin + tol && *v < zmax - tol)
                .map(|(p, _)| p)
                .collect();
        }
        if inliers.len() < 5 {
            break;
        }
        axis = refine(axis, &inliers);
    }
    if axis.dir.z < 0.0 || (axis.dir.z == 0.0 && (axis.dir.y < 0.0 || (axis.dir.y == 0.0 && axis.dir.x < 0.0))) {
        axis.dir = -axis.dir;
    }

    let along: Vec<f64> = points
        .iter()
        .filter(|p| axis.lateral_distance(p) < tol)
        .map(|p| (p.coords - axis.point).dot(&axis.dir))
        .collect();
    let (zmin, zmax) = along.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
    if !(zmax > zmin) {
        return Err(ShapeError::FitRejected { ratio: 0.0 });
    }
    let height = zmax - zmin;
    let centre = axis.point + axis.dir * (0.5 * (zmin + zmax));
    let rotation = UnitQuaternion::rotation_between(&Vector3::z(), &axis.dir)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    let pose = Pose::new(rotation, centre);

    let inv = pose.inverse();
    let dists: Vec<f64> = points
        .iter()
        .map(|p| solid_cylinder_surface_distance(&inv.transform_point(p).coords, axis.radius, height))
        .filter(|&d| d < tol)
        .collect();
    let ratio = dists.len() as f64 / n as f64;
    if ratio < cfg.min_inlier_ratio {
        return Err(ShapeError::FitRejected { ratio });
    }
    let fit_rms = (dists.iter().map(|d| d * d).sum::<f64>() / dists.len() as f64).sqrt();
    Ok(PrimitiveShape {
        kind: ShapeKind::Cylinder {
            pose,
            radius: axis.radius,
            height,
        },
        inlier_count: dists.len(),
        fit_rms,
    })
}
