use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Point3, Pose, Vector3};

use super::{PrimitiveShape, ShapeConfig, ShapeError, ShapeKind};

/// Points used for the rotation search.
const SEARCH_SAMPLE: usize = 500;
/// Half-width and step of the final fine rotation pass, degrees.
const FINE_SEARCH: (f64, f64) = (3.0, 0.3);
/// A face adopts its median offset when at least this fraction lies on it.
const MIN_FACE_SUPPORT: f64 = 0.03;

/// Distance from a local point to the surface of the origin-centred box with
/// the given half extents.
pub(crate) fn box_surface_distance(p: &Vector3, half: &Vector3) -> f64 {
    let q = p.abs() - half;
    if q.max() <= 0.0 {
        -q.max()
    } else {
        q.map(|v| v.max(0.0)).norm()
    }
}

fn local_coords(points: &[Point3], centre: &Vector3, axes: &Matrix3<f64>) -> Vec<Vector3> {
    let t = axes.transpose();
    points.iter().map(|p| t * (p.coords - centre)).collect()
}

fn aabb_volume(points: &[Point3], axes: &Matrix3<f64>) -> f64 {
    let t = axes.transpose();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        let q = t * p.coords;
        lo = lo.inf(&q);
        hi = hi.sup(&q);
    }
    (hi - lo).product()
}

/// Grid search over Euler offsets around `axes`; returns the best axes and
/// whether the optimum sits on the grid boundary.
fn rotation_grid(points: &[Point3], axes: &Matrix3<f64>, half_deg: f64, step_deg: f64) -> (Matrix3<f64>, bool) {
    let steps = (half_deg / step_deg).round() as i64;
    let mut best = (aabb_volume(points, axes), *axes, false);
    for a in -steps..=steps {
        for b in -steps..=steps {
            for c in -steps..=steps {
                let r = Rotation3::from_euler_angles(
                    (a as f64 * step_deg).to_radians(),
                    (b as f64 * step_deg).to_radians(),
                    (c as f64 * step_deg).to_radians(),
                );
                let cand = axes * r.matrix();
                let v = aabb_volume(points, &cand);
                if v < best.0 {
                    let edge = a.abs() == steps || b.abs() == steps || c.abs() == steps;
                    best = (v, cand, edge);
                }
            }
        }
    }
    (best.1, best.2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Oriented box fit: PCA axes refined by a minimum-volume rotation search,
/// extents from quantiles, then each well-supported face moved to the median
/// offset of its points.
pub fn fit_cuboid_ransac(points: &[Point3], cfg: &ShapeConfig, seed: u64) -> Result<PrimitiveShape, ShapeError> {
    let n = points.len();
    if n < cfg.min_fit_points {
        return Err(ShapeError::TooFewPoints {
            needed: cfg.min_fit_points,
            got: n,
        });
    }
    let tol = cfg.fit_tolerance;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    let mut axes = cov.symmetric_eigen().eigenvectors;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subset: Vec<Point3> = if n > SEARCH_SAMPLE {
        let mut idx = sample(&mut rng, n, SEARCH_SAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| Point3::from(points[i].coords - mean)).collect()
    } else {
        points.iter().map(|p| Point3::from(p.coords - mean)).collect()
    };
    for _ in 0..4 {
        let (a, edge) = rotation_grid(&subset, &axes, cfg.cuboid_search_deg, cfg.cuboid_step_deg);
        axes = a;
        if !edge {
            break;
        }
    }
    axes = rotation_grid(&subset, &axes, FINE_SEARCH.0, FINE_SEARCH.1).0;
    if axes.determinant() < 0.0 {
        axes.set_column(2, &(-axes.column(2)));
    }

    let local = local_coords(points, &mean, &axes);
    let mut lo = Vector3::zeros();
    let mut hi = Vector3::zeros();
    for a in 0..3 {
        let mut c: Vec<f64> = local.iter().map(|q| q[a]).collect();
        c.sort_by(f64::total_cmp);
        lo[a] = quantile(&c, cfg.extent_quantile);
        hi[a] = quantile(&c, 1.0 - cfg.extent_quantile);
    }

    // Face index 2a is the low face of axis a, 2a+1 the high face.
    let mut on_face: [Vec<f64>; 6] = Default::default();
    for q in &local {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..3 {
            for (f, bound) in [(2 * a, lo[a]), (2 * a + 1, hi[a])] {
                let d = (q[a] - bound).abs();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((f, d));
                }
            }
        }
        if let Some((f, d)) = best {
            if d < tol {
                on_face[f].push(q[f / 2]);
            }
        }
    }
    for (f, vals) in on_face.into_iter().enumerate() {
        if vals.len() as f64 >= MIN_FACE_SUPPORT * n as f64 {
            let m = median(vals);
            if f % 2 == 0 {
                lo[f / 2] = m;
            } else {
                hi[f / 2] = m;
            }
        }
    }
    let extents = (hi - lo).map(|v| v.max(0.0));
    let centre = mean + axes * ((lo + hi) / 2.0);
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(axes));
    let pose = Pose::new(rotation, centre);

    let half = extents / 2.0;
    let inv = pose.inverse();
    let dists: Vec<f64> = points
        .iter()
        .map(|p| box_surface_distance(&inv.transform_point(p).coords, &half))
        .filter(|&d| d < tol)
        .collect();
    let ratio = dists.len() as f64 / n as f64;
    if ratio < cfg.min_inlier_ratio {
        return Err(ShapeError::FitRejected { ratio });
    }
    let fit_rms = (dists.iter().map(|d| d * d).sum::<f64>() / dists.len() as f64).sqrt();
    Ok(PrimitiveShape {
        kind: ShapeKind::Cuboid { pose, extents },
        inlier_count: dists.len(),
        fit_rms,
    })
}
