//! Virtual depth maps from a reconstructed point cloud.
//!
//! The cloud is denoised, the tabletop plane is found by RANSAC and its
//! points are replaced by a clean synthetic grid. Depth maps are splatted per
//! view and refined by region filtering, temporal averaging across nearby
//! views, a median filter and analytic fill from the tabletop plane.

use nalgebra::{Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::MIN_DEPTH;
use crate::{Intrinsics, KdTree, Point3, Pose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DepthError {
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("point cloud arrays have mismatched lengths")]
    LengthMismatch,
    #[error("point cloud contains a non-finite coordinate at index {index}")]
    NonFinite { index: usize },
    #[error("depth maps and poses differ in count or size")]
    InconsistentMaps,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub source_views: Option<Vec<u32>>,
    pub timestamps: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), DepthError> {
        let n = self.points.len();
        if self.colors.as_ref().is_some_and(|c| c.len() != n)
            || self.source_views.as_ref().is_some_and(|c| c.len() != n)
            || self.timestamps.as_ref().is_some_and(|c| c.len() != n)
        {
            return Err(DepthError::LengthMismatch);
        }
        if let Some(index) = self.points.iter().position(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(DepthError::NonFinite { index });
        }
        Ok(())
    }

    /// The sub-cloud at `indices`, carrying parallel attributes along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            source_views: self.source_views.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            timestamps: self.timestamps.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// `{x : n·x + d = 0}` with unit `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// Normalizes `(normal, offset)` jointly; `None` for a zero normal.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Option<Self> {
        let len = normal.norm();
        if !(len > 0.0 && len.is_finite()) {
            return None;
        }
        Some(Self {
            normal: normal / len,
            offset: offset / len,
        })
    }

    /// Plane through three points; `None` if they are (nearly) collinear.
    pub fn from_points(a: &Point3, b: &Point3, c: &Point3) -> Option<Self> {
        let n = (b - a).cross(&(c - a));
        let scale = (b - a).norm_squared().max((c - a).norm_squared());
        if n.norm_squared() <= 1e-24 * scale * scale || scale == 0.0 {
            return None;
        }
        let n = n.normalize();
        Some(Self {
            normal: n,
            offset: -n.dot(&a.coords),
        })
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) + self.offset
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
        }
    }

    /// The plane point closest to the origin.
    pub fn anchor(&self) -> Point3 {
        Point3::from(-self.normal * self.offset)
    }

    /// Parameter `t > 0` with `origin + t·dir` on the plane.
    pub fn ray_intersection(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = -self.signed_distance(origin) / denom;
        (t > 0.0 && t.is_finite()).then_some(t)
    }

    /// Orthonormal in-plane axes `(e1, e2)` with `e1 × e2 = n`.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal;
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (helper - n * n.dot(&helper)).normalize();
        let e2 = n.cross(&e1);
        (e1, e2)
    }
}

/// Row-major depth raster with an explicit validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    /// Camera z-depth in meters; meaningful only where `valid`.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.depth[i])
    }

    /// Sets a valid depth; non-positive or non-finite values invalidate.
    pub fn set(&mut self, x: u32, y: u32, depth: f64) {
        let i = self.index(x, y);
        if depth > 0.0 && depth.is_finite() {
            self.depth[i] = depth;
            self.valid[i] = true;
        } else {
            self.clear(x, y);
        }
    }

    pub fn clear(&mut self, x: u32, y: u32) {
        let i = self.index(x, y);
        self.depth[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// World points of all valid pixels.
    pub fn unproject_all(&self, camera_pose: &Pose, k: &Intrinsics) -> Vec<Point3> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(d) = self.get(x, y) {
                    let p = k.backproject(&Point2::new(x as f64, y as f64), d);
                    out.push(camera_pose.transform_point(&p));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub denoise_k: usize,
    pub denoise_std_ratio: f64,
    /// Meters.
    pub plane_inlier_threshold: f64,
    pub plane_iterations: usize,
    /// Meters below the plane still treated as tabletop.
    pub band_low: f64,
    /// Meters above the plane still treated as tabletop.
    pub band_high: f64,
    /// Meters between re-inserted tabletop points.
    pub grid_spacing: f64,
    pub splat_radius_px: f64,
    pub min_region_px: usize,
    /// Meters; 4-neighbours closer than this join one region.
    pub region_similarity: f64,
    /// Neighbouring views on each side used for temporal averaging.
    pub temporal_window: usize,
    /// Meters; depths closer than this to the anchor value are averaged.
    pub temporal_agreement: f64,
    /// Odd side length of the median window.
    pub median_kernel: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            denoise_k: 16,
            denoise_std_ratio: 2.0,
            plane_inlier_threshold: 0.005,
            plane_iterations: 1000,
            band_low: 0.01,
            band_high: 0.005,
            grid_spacing: 0.002,
            splat_radius_px: 1.0,
            min_region_px: 50,
            region_similarity: 0.01,
            temporal_window: 2,
            temporal_agreement: 0.01,
            median_kernel: 3,
        }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("denoise_std_ratio", self.denoise_std_ratio),
            ("plane_inlier_threshold", self.plane_inlier_threshold),
            ("grid_spacing", self.grid_spacing),
            ("region_similarity", self.region_similarity),
            ("temporal_agreement", self.temporal_agreement),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("depth.{name} must be positive, got {v}"));
            }
        }
        if !(self.band_low >= 0.0 && self.band_high >= 0.0) {
            return Err("depth band limits must be nonnegative".into());
        }
        if !(self.splat_radius_px >= 0.0 && self.splat_radius_px.is_finite()) {
            return Err("depth.splat_radius_px must be finite and nonnegative".into());
        }
        if self.denoise_k == 0 || self.plane_iterations == 0 {
            return Err("depth.denoise_k and depth.plane_iterations must be at least 1".into());
        }
        if self.median_kernel % 2 == 0 {
            return Err("depth.median_kernel must be odd".into());
        }
        Ok(())
    }
}

/// Statistical outlier removal: drops points whose mean distance to their
/// `k` nearest neighbours exceeds the global mean by more than
/// `std_ratio` standard deviations.
pub fn denoise_cloud(cloud: &PointCloud, k: usize, std_ratio: f64) -> PointCloud {
    let n = cloud.len();
    if n < 2 || k == 0 || std_ratio == f64::INFINITY {
        return cloud.clone();
    }
    let tree = KdTree::new(&cloud.points);
    let mean_dist: Vec<f64> = (0..n)
        .map(|i| {
            let nn = tree.knn(&cloud.points[i], k + 1);
            let others: Vec<f64> = nn.iter().filter(|(j, _)| *j != i).take(k).map(|(_, d2)| d2.sqrt()).collect();
            others.iter().sum::<f64>() / others.len().max(1) as f64
        })
        .collect();
    let mu = mean_dist.iter().sum::<f64>() / n as f64;
    let var = mean_dist.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n as f64;
    let limit = mu + std_ratio * var.sqrt();
    let keep: Vec<usize> = (0..n).filter(|&i| mean_dist[i] <= limit).collect();
    cloud.select(&keep)
}

fn count_inliers(points: &[Point3], plane: &Plane, threshold: f64) -> usize {
    points.iter().filter(|p| plane.signed_distance(p).abs() <= threshold).count()
}

fn inlier_indices(points: &[Point3], plane: &Plane, threshold: f64) -> Vec<usize> {
    (0..points.len()).filter(|&i| plane.signed_distance(&points[i]).abs() <= threshold).collect()
}

/// Total-least-squares plane through `points`.
pub fn fit_plane_least_squares(points: &[Point3]) -> Option<Plane> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let normal: Vector3<f64> = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
    Plane::new(normal, -normal.dot(&mean))
}

/// Plane with the most points within `threshold`, refitted by least squares.
///
/// The refit replaces the sampled plane only if it keeps at least as many
/// inliers. The normal is oriented so that the mean `viewpoint − plane point`
/// projects positively on it; without viewpoints, so that `n_z ≥ 0`.
pub fn fit_plane_ransac(
    points: &[Point3],
    threshold: f64,
    iterations: usize,
    seed: u64,
    viewpoints: &[Point3],
) -> Result<(Plane, Vec<usize>), DepthError> {
    let n = points.len();
    if n < 3 {
        return Err(DepthError::InsufficientPoints { needed: 3, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iterations {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let c = rng.random_range(0..n);
        if a == b || b == c || a == c {
            continue;
        }
        let Some(plane) = Plane::from_points(&points[a], &points[b], &points[c]) else {
            continue;
        };
        let count = count_inliers(points, &plane, threshold);
        if best.as_ref().map_or(true, |(bc, _)| count > *bc) {
            best = Some((count, plane));
        }
    }
    if n == 3 {
        best = Plane::from_points(&points[0], &points[1], &points[2]).map(|p| (count_inliers(points, &p, threshold), p));
    }
    let Some((count, mut plane)) = best else {
        return Err(DepthError::InsufficientPoints { needed: 3, got: 0 });
    };
    let inliers = inlier_indices(points, &plane, threshold);
    let support: Vec<Point3> = inliers.iter().map(|&i| points[i]).collect();
    if let Some(refit) = fit_plane_least_squares(&support) {
        if count_inliers(points, &refit, threshold) >= count {
            plane = refit;
        }
    }
    let side = if viewpoints.is_empty() {
        plane.normal.z
    } else {
        let anchor = plane.anchor();
        viewpoints.iter().map(|c| (c - anchor).dot(&plane.normal)).sum::<f64>()
    };
    if side < 0.0 {
        plane = plane.flipped();
    }
    let inliers = inlier_indices(points, &plane, threshold);
    Ok((plane, inliers))
}

fn cross2(o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

fn inside_convex(hull: &[[f64; 2]], p: &[f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| cross2(&hull[i], &hull[(i + 1) % hull.len()], p) >= -1e-12)
}

/// Removes every point with signed distance at most `band_high` (the tabletop
/// band and anything beneath it) and re-inserts a square grid of exact plane
/// points, `spacing` apart, over the convex hull of the band points.
///
/// Re-inserted points take the mean band colour; per-point view ids and
/// timestamps are dropped because the grid has no source view.
pub fn remove_replace_tabletop(cloud: &PointCloud, plane: &Plane, band_low: f64, band_high: f64, spacing: f64) -> PointCloud {
    let mut keep = Vec::new();
    let mut band = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let s = plane.signed_distance(p);
        if s > band_high {
            keep.push(i);
        } else if s >= -band_low {
            band.push(i);
        }
    }
    let mut out = cloud.select(&keep);
    let (e1, e2) = plane.basis();
    let anchor = plane.anchor();
    let flat: Vec<[f64; 2]> = band
        .iter()
        .map(|&i| {
            let d = cloud.points[i] - anchor;
            [d.dot(&e1), d.dot(&e2)]
        })
        .collect();
    let hull = convex_hull_2d(&flat);
    if hull.len() < 3 || !(spacing > 0.0) {
        return out;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for h in &hull {
        for a in 0..2 {
            lo[a] = lo[a].min(h[a]);
            hi[a] = hi[a].max(h[a]);
        }
    }
    let colour = cloud.colors.as_ref().map(|c| {
        let mut acc = [0u64; 3];
        for &i in &band {
            for ch in 0..3 {
                acc[ch] += c[i][ch] as u64;
            }
        }
        let m = band.len() as u64;
        [(acc[0] / m) as u8, (acc[1] / m) as u8, (acc[2] / m) as u8]
    });
    let start = [(lo[0] / spacing).ceil() as i64, (lo[1] / spacing).ceil() as i64];
    let end = [(hi[0] / spacing).floor() as i64, (hi[1] / spacing).floor() as i64];
    for iu in start[0]..=end[0] {
        for iv in start[1]..=end[1] {
            let uv = [iu as f64 * spacing, iv as f64 * spacing];
            if inside_convex(&hull, &uv) {
                out.points.push(anchor + e1 * uv[0] + e2 * uv[1]);
                if let (Some(c), Some(col)) = (out.colors.as_mut(), colour) {
                    c.push(col);
                }
            }
        }
    }
    out.source_views = None;
    out.timestamps = None;
    out
}

/// Z-buffered splatting: each point covers the pixels within
/// `splat_radius_px` of its projection; the nearest depth wins.
pub fn render_virtual_depth(points: &[Point3], camera_pose: &Pose, k: &Intrinsics, splat_radius_px: f64) -> DepthMap {
    let mut map = DepthMap::invalid(k.width, k.height);
    let view = camera_pose.inverse();
    let r = splat_radius_px.max(0.0);
    let (w, h) = (k.width as i64, k.height as i64);
    for p in points {
        let q = view.transform_point(p);
        if q.z <= MIN_DEPTH {
            continue;
        }
        let Ok(px) = k.project_camera_point(&q) else { continue };
        let x0 = ((px.x - r).ceil() as i64).max(0);
        let x1 = ((px.x + r).floor() as i64).min(w - 1);
        let y0 = ((px.y - r).ceil() as i64).max(0);
        let y1 = ((px.y + r).floor() as i64).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - px.x, y as f64 - px.y);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let i = y as usize * k.width as usize + x as usize;
                if !map.valid[i] || q.z < map.depth[i] {
                    map.depth[i] = q.z;
                    map.valid[i] = true;
                }
            }
        }
    }
    map
}

/// Invalidates 4-connected regions smaller than `min_region` pixels, where
/// neighbours connect when their depths differ by at most `similarity`.
pub fn remove_small_regions(map: &DepthMap, min_region: usize, similarity: f64) -> DepthMap {
    let (w, h) = (map.width as usize, map.height as usize);
    let mut label = vec![usize::MAX; w * h];
    let mut out = map.clone();
    let mut stack = Vec::new();
    let mut region = Vec::new();
    for start in 0..w * h {
        if !map.valid[start] || label[start] != usize::MAX {
            continue;
        }
        region.clear();
        stack.push(start);
        label[start] = start;
        while let Some(i) = stack.pop() {
            region.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if map.valid[j] && label[j] == usize::MAX && (map.depth[j] - map.depth[i]).abs() <= similarity {
                    label[j] = start;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if region.len() < min_region {
            for &i in &region {
                out.valid[i] = false;
                out.depth[i] = 0.0;
            }
        }
    }
    out
}

/// Re-renders `source` (seen from `source_pose`) into the camera at
/// `target_pose`, keeping the nearest depth per pixel.
pub fn warp_depth(source: &DepthMap, source_pose: &Pose, target_pose: &Pose, k: &Intrinsics) -> DepthMap {
    let points = source.unproject_all(source_pose, k);
    render_virtual_depth(&points, target_pose, k, 0.5)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        a + (b - a) / 2.0
    }
}

/// Median over the valid pixels of each valid pixel's window.
pub fn median_filter(map: &DepthMap, kernel: usize) -> DepthMap {
    let r = (kernel / 2) as i64;
    let (w, h) = (map.width as i64, map.height as i64);
    let mut out = map.clone();
    let mut window = Vec::with_capacity(kernel * kernel);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if !map.valid[i] {
                continue;
            }
            window.clear();
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    let j = (yy * w + xx) as usize;
                    if map.valid[j] {
                        window.push(map.depth[j]);
                    }
                }
            }
            out.depth[i] = median(&mut window);
        }
    }
    out
}

/// Mean of `values` computed as offsets from `anchor`, so identical inputs
/// average to themselves exactly.
fn anchored_mean(anchor: f64, values: &[f64]) -> f64 {
    anchor + values.iter().map(|v| v - anchor).sum::<f64>() / values.len() as f64
}

/// Cleans the depth map of view `reference` using its temporal neighbours.
///
/// Steps, in order: small-region removal on every map; per-pixel averaging
/// of the reference value with warped neighbour values within
/// `temporal_agreement` of it (at least two agreeing values required; an
/// invalid reference pixel anchors on the nearest warped value); a median
/// filter; and ray–plane fill of the remaining invalid pixels.
pub fn refine_depth_sequence(
    maps: &[DepthMap],
    poses: &[Pose],
    reference: usize,
    plane: &Plane,
    k: &Intrinsics,
    cfg: &DepthConfig,
) -> Result<DepthMap, DepthError> {
    if maps.is_empty() || maps.len() != poses.len() || reference >= maps.len() {
        return Err(DepthError::InconsistentMaps);
    }
    if maps.iter().any(|m| m.width != k.width || m.height != k.height) {
        return Err(DepthError::InconsistentMaps);
    }
    let lo = reference.saturating_sub(cfg.temporal_window);
    let hi = (reference + cfg.temporal_window).min(maps.len() - 1);
    let cleaned_ref = remove_small_regions(&maps[reference], cfg.min_region_px, cfg.region_similarity);
    let warped: Vec<DepthMap> = (lo..=hi)
        .filter(|&i| i != reference)
        .map(|i| {
            let cleaned = remove_small_regions(&maps[i], cfg.min_region_px, cfg.region_similarity);
            warp_depth(&cleaned, &poses[i], &poses[reference], k)
        })
        .collect();

    let mut averaged = cleaned_ref.clone();
    let mut values = Vec::with_capacity(warped.len() + 1);
    for i in 0..averaged.depth.len() {
        let anchor = if cleaned_ref.valid[i] {
            cleaned_ref.depth[i]
        } else {
            match warped.iter().filter(|m| m.valid[i]).map(|m| m.depth[i]).min_by(|a, b| a.total_cmp(b)) {
                Some(d) => d,
                None => continue,
            }
        };
        values.clear();
        if cleaned_ref.valid[i] {
            values.push(anchor);
        }
        values.extend(
            warped
                .iter()
                .filter(|m| m.valid[i] && (m.depth[i] - anchor).abs() <= cfg.temporal_agreement)
                .map(|m| m.depth[i]),
        );
        if values.len() >= 2 {
            averaged.depth[i] = anchored_mean(anchor, &values);
            averaged.valid[i] = true;
        }
    }

    let mut out = median_filter(&averaged, cfg.median_kernel);
    fill_from_plane(&mut out, &poses[reference], plane, k);
    Ok(out)
}

/// Gives every invalid pixel whose viewing ray meets `plane` in front of
/// the camera the analytic plane depth.
pub fn fill_from_plane(map: &mut DepthMap, camera_pose: &Pose, plane: &Plane, k: &Intrinsics) {
    let origin = Point3::from(camera_pose.translation);
    for y in 0..map.height {
        for x in 0..map.width {
            let i = map.index(x, y);
            if map.valid[i] {
                continue;
            }
            let dir = camera_pose.transform_vector(&k.ray(&Point2::new(x as f64, y as f64)));
            if let Some(t) = plane.ray_intersection(&origin, &dir) {
                map.set(x, y, t);
            }
        }
    }
}

/// Output of [`virtualize_depth`].
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualDepth {
    pub plane: Plane,
    /// Denoised cloud with the tabletop replaced by an exact grid.
    pub cloud: PointCloud,
    /// One refined map per view, in input order.
    pub maps: Vec<DepthMap>,
}

/// Full virtual-depth stage: denoise, fit the tabletop, replace it, render
/// one map per view and refine each against its temporal neighbours. All
/// views must share `k`; views are taken to be in capture order.
pub fn virtualize_depth(
    cloud: &PointCloud,
    camera_poses: &[Pose],
    k: &Intrinsics,
    cfg: &DepthConfig,
    seed: u64,
) -> Result<VirtualDepth, DepthError> {
    cloud.validate()?;
    let clean = denoise_cloud(cloud, cfg.denoise_k, cfg.denoise_std_ratio);
    let eyes: Vec<Point3> = camera_poses.iter().map(|p| Point3::from(p.translation)).collect();
    let (plane, _) = fit_plane_ransac(&clean.points, cfg.plane_inlier_threshold, cfg.plane_iterations, seed, &eyes)?;
    let replaced = remove_replace_tabletop(&clean, &plane, cfg.band_low, cfg.band_high, cfg.grid_spacing);
    let raw: Vec<DepthMap> = camera_poses
        .iter()
        .map(|pose| render_virtual_depth(&replaced.points, pose, k, cfg.splat_radius_px))
        .collect();
    let maps = (0..raw.len())
        .map(|i| refine_depth_sequence(&raw, camera_poses, i, &plane, k, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VirtualDepth {
        plane,
        cloud: replaced,
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use rand_distr::{Distribution, Normal};

    fn k() -> Intrinsics {
        Intrinsics::new(300.0, 300.0, 80.0, 60.0, 160, 120).unwrap()
    }

    fn grid(n: usize, spacing: f64, z: f64) -> Vec<Point3> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point3::new(i as f64 * spacing, j as f64 * spacing, z));
            }
        }
        pts
    }

    #[test]
    fn denoise_removes_far_outlier() {
        let mut pts = grid(20, 0.01, 0.0);
        pts.push(Point3::new(1.0, 1.0, 1.0));
        let cloud = PointCloud::new(pts.clone());
        let out = denoise_cloud(&cloud, 16, 2.0);
        assert_eq!(out.len(), 400);
        assert!(out.points.iter().all(|p| p.z == 0.0));
        assert_eq!(denoise_cloud(&cloud, 16, f64::INFINITY), cloud);
    }

    #[test]
    fn plane_from_three_points_is_exact() {
        let pts = vec![Point3::new(0.0, 0.0, 0.7), Point3::new(1.0, 0.0, 0.7), Point3::new(0.0, 1.0, 0.7)];
        let (plane, inl) = fit_plane_ransac(&pts, 1e-6, 50, 1, &[]).unwrap();
        assert_eq!(inl.len(), 3);
        assert!((plane.normal - Vector3::z()).norm() < 1e-12);
        assert!((plane.offset + 0.7).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_are_insufficient() {
        let pts: Vec<Point3> = (0..20).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(fit_plane_ransac(&pts, 1e-3, 100, 1, &[]), Err(DepthError::InsufficientPoints { .. })));
    }

    #[test]
    fn plane_orientation_faces_viewpoints() {
        let pts = grid(10, 0.1, 0.0);
        let (plane, _) = fit_plane_ransac(&pts, 1e-3, 100, 2, &[Point3::new(0.0, 0.0, -1.0)]).unwrap();
        assert!(plane.normal.z < 0.0);
    }

    #[test]
    fn tabletop_replacement_preserves_objects() {
        let plane = Plane::new(Vector3::z(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let mut pts: Vec<Point3> = (0..2000)
            .map(|_| Point3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), noise.sample(&mut rng)))
            .collect();
        let object: Vec<Point3> = (0..200)
            .map(|_| Point3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.1..0.2)))
            .collect();
        pts.extend(object.iter().copied());
        pts.push(Point3::new(0.0, 0.0, -0.05));
        let out = remove_replace_tabletop(&PointCloud::new(pts), &plane, 0.01, 0.005, 0.01);
        for p in &object {
            assert!(out.points.contains(p));
        }
        for p in &out.points {
            let s = plane.signed_distance(p);
            assert!(s > 0.005 || s.abs() < 1e-9, "{s}");
        }
        let grid_count = out.points.iter().filter(|p| p.z.abs() < 1e-9).count();
        assert!(grid_count > 3000);
    }

    #[test]
    fn pure_plane_cloud_maps_onto_plane() {
        let plane = Plane::new(Vector3::new(0.1, 0.2, 1.0), -0.3).unwrap();
        let (e1, e2) = plane.basis();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point3> = (0..500)
            .map(|_| plane.anchor() + e1 * rng.random_range(-0.2..0.2) + e2 * rng.random_range(-0.2..0.2))
            .collect();
        let out = remove_replace_tabletop(&PointCloud::new(pts), &plane, 0.01, 0.005, 0.01);
        assert!(!out.is_empty());
        assert!(out.points.iter().all(|p| plane.signed_distance(p).abs() < 1e-9));
    }

    #[test]
    fn single_point_renders_at_principal_point() {
        let k = k();
        let map = render_virtual_depth(&[Point3::new(0.0, 0.0, 1.0)], &Pose::identity(), &k, 1.0);
        assert_eq!(map.get(80, 60), Some(1.0));
        assert_eq!(map.valid_count(), 5);
        let two = render_virtual_depth(&[Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, 1.0)], &Pose::identity(), &k, 1.0);
        assert_eq!(two.get(80, 60), Some(1.0));
    }

    #[test]
    fn dense_plane_fills_its_footprint() {
        let k = k();
        let pts: Vec<Point3> = grid(300, 0.001, 1.0).into_iter().map(|p| Point3::new(p.x - 0.15, p.y - 0.15, p.z)).collect();
        let map = render_virtual_depth(&pts, &Pose::identity(), &k, 1.0);
        // Footprint of [-0.15, 0.149]² at z = 1: pixels 35..=124 by 15..=104.
        let mut inside = 0;
        let mut hit = 0;
        for y in 16..104 {
            for x in 36..124 {
                inside += 1;
                if map.get(x, y).is_some() {
                    hit += 1;
                }
            }
        }
        assert!(hit as f64 >= 0.99 * inside as f64);
    }

    #[test]
    fn salt_noise_is_removed() {
        let mut map = DepthMap::invalid(160, 120);
        for y in 20..100 {
            for x in 20..140 {
                map.set(x, y, 1.0);
            }
        }
        map.set(5, 5, 0.6);
        map.set(150, 110, 0.8);
        let out = remove_small_regions(&map, 50, 0.01);
        assert_eq!(out.get(5, 5), None);
        assert_eq!(out.get(150, 110), None);
        assert_eq!(out.get(50, 50), Some(1.0));
    }

    #[test]
    fn identical_maps_refine_to_themselves() {
        let k = k();
        let plane = Plane::new(Vector3::z(), 0.0).unwrap();
        let pose = look_at(&Point3::new(0.0, 0.0, 1.0), &Point3::origin(), &Vector3::y());
        let mut map = DepthMap::invalid(160, 120);
        for y in 10..110 {
            for x in 10..150 {
                map.set(x, y, 0.8);
            }
        }
        let maps = vec![map.clone(); 3];
        let poses = vec![pose; 3];
        let out = refine_depth_sequence(&maps, &poses, 1, &plane, &k, &DepthConfig::default()).unwrap();
        for y in 0..120 {
            for x in 0..160 {
                match map.get(x, y) {
                    Some(d) => assert!((out.get(x, y).unwrap() - d).abs() < 1e-9),
                    None => assert!((out.get(x, y).unwrap() - 1.0).abs() < 1e-9),
                }
            }
        }
    }

    #[test]
    fn invalid_map_over_plane_gets_analytic_depth() {
        let k = k();
        let plane = Plane::new(Vector3::z(), 0.0).unwrap();
        let pose = look_at(&Point3::new(0.3, -0.4, 0.9), &Point3::origin(), &Vector3::z());
        let out = refine_depth_sequence(&[DepthMap::invalid(160, 120)], &[pose], 0, &plane, &k, &DepthConfig::default()).unwrap();
        for y in 0..120 {
            for x in 0..160 {
                let d = out.get(x, y).unwrap();
                let p = pose.transform_point(&k.backproject(&Point2::new(x as f64, y as f64), d));
                assert!(p.z.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn convex_hull_of_square_with_interior() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5], [0.5, 0.0]];
        let hull = convex_hull_2d(&pts);
        assert_eq!(hull.len(), 4);
        assert!(inside_convex(&hull, &[0.2, 0.9]));
        assert!(!inside_convex(&hull, &[1.2, 0.5]));
    }
}
