//! Deterministic synthetic tabletop scenes used as ground truth.
//!
//! The table is the plane `z = 0` with normal `+z`. Objects are upright
//! cuboids and cylinders resting on it, rotated about `z` only, and each one
//! doubles as a known model (eight bounding-box corners plus the centroid as
//! keypoints) and as a ground-truth primitive. Every random draw comes from a
//! ChaCha stream derived from the caller's seed.

use nalgebra::{Point2, UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{DepthMap, Plane, PointCloud};
use crate::fusion::derive_seed;
use crate::geometry::look_at;
use crate::shapes::{PrimitiveShape, SegmentationInstance, SegmentedView, ShapeClass, ShapeKind};
use crate::{Detection, Intrinsics, Model, Point3, Pose, Vector3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("could not place object {index} without overlap after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Objects are placed with centres in `[-h, h]²`.
    pub workspace_half_extent: f64,
    pub cylinder_fraction: f64,
    /// Meters; cuboid edge length range.
    pub cuboid_edge: [f64; 2],
    pub cylinder_radius: [f64; 2],
    pub cylinder_height: [f64; 2],
    /// Meters of free space kept between object footprints.
    pub placement_margin: f64,
    pub placement_attempts: usize,
    pub mesh_vertices: usize,
    pub camera_count: usize,
    /// Horizontal camera distance from the workspace centre.
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Degrees of azimuth covered by the camera arc.
    pub camera_arc_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_px: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 5,
            max_objects: 20,
            workspace_half_extent: 0.35,
            cylinder_fraction: 0.5,
            cuboid_edge: [0.04, 0.12],
            cylinder_radius: [0.02, 0.05],
            cylinder_height: [0.05, 0.15],
            placement_margin: 0.02,
            placement_attempts: 2000,
            mesh_vertices: 500,
            camera_count: 8,
            camera_radius: 0.8,
            camera_height: 0.6,
            camera_arc_deg: 120.0,
            image_width: 640,
            image_height: 480,
            focal_px: 525.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 ≤ min_objects ≤ max_objects");
        }
        for (name, r) in [
            ("cuboid_edge", self.cuboid_edge),
            ("cylinder_radius", self.cylinder_radius),
            ("cylinder_height", self.cylinder_height),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(&format!("{name} must be a positive ascending range"));
            }
        }
        if !(0.0..=1.0).contains(&self.cylinder_fraction) {
            return bad("cylinder_fraction must lie in [0, 1]");
        }
        if !(self.workspace_half_extent > 0.0) || self.camera_count == 0 || self.placement_attempts == 0 {
            return bad("workspace, camera_count and placement_attempts must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 || !(self.focal_px > 0.0) {
            return bad("image size and focal length must be positive");
        }
        if !(self.camera_radius > 0.0 || self.camera_height > 0.0) {
            return bad("cameras must not sit at the workspace centre");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal_px,
            self.focal_px,
            (self.image_width as f64 - 1.0) / 2.0,
            (self.image_height as f64 - 1.0) / 2.0,
            self.image_width,
            self.image_height,
        )
        .expect("validated intrinsics")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// World-from-camera.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub model: Model,
    pub pose: Pose,
    pub primitive: PrimitiveShape,
}

impl SceneObject {
    /// Upright cuboid resting on the table at `(x, y)` with the given yaw.
    pub fn cuboid(class_id: impl Into<String>, extents: Vector3, x: f64, y: f64, yaw: f64, mesh_vertices: usize, seed: u64) -> Self {
        let pose = yaw_pose(x, y, extents.z / 2.0, yaw);
        let kind = ShapeKind::Cuboid { pose, extents };
        Self::from_kind(class_id.into(), kind, extents / 2.0, mesh_vertices, seed)
    }

    /// Upright cylinder resting on the table at `(x, y)` with the given yaw.
    pub fn cylinder(class_id: impl Into<String>, radius: f64, height: f64, x: f64, y: f64, yaw: f64, mesh_vertices: usize, seed: u64) -> Self {
        let pose = yaw_pose(x, y, height / 2.0, yaw);
        let kind = ShapeKind::Cylinder { pose, radius, height };
        Self::from_kind(class_id.into(), kind, Vector3::new(radius, radius, height / 2.0), mesh_vertices, seed)
    }

    fn from_kind(class_id: String, kind: ShapeKind, half: Vector3, mesh_vertices: usize, seed: u64) -> Self {
        let mut keypoints = Vec::with_capacity(9);
        for i in 0..8 {
            let s = |b: usize| if i & b != 0 { 1.0 } else { -1.0 };
            keypoints.push(Point3::new(s(1) * half.x, s(2) * half.y, s(4) * half.z));
        }
        keypoints.push(Point3::origin());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let local = local_shape(&kind);
        let mesh: Vec<Point3> = (0..mesh_vertices).map(|_| sample_local(&local, &mut rng).0).collect();
        let symmetric = matches!(kind, ShapeKind::Cylinder { .. });
        let pose = match kind {
            ShapeKind::Cuboid { pose, .. } | ShapeKind::Cylinder { pose, .. } => pose,
        };
        Self {
            model: Model::new(class_id, keypoints, mesh, symmetric).expect("nine keypoints"),
            pose,
            primitive: PrimitiveShape {
                kind,
                inlier_count: 0,
                fit_rms: 0.0,
            },
        }
    }

    pub fn shape_class(&self) -> ShapeClass {
        self.primitive.class()
    }

    /// World-frame axis-aligned bounds `(min, max)`.
    pub fn aabb(&self) -> (Vector3, Vector3) {
        let pts: Vec<Vector3> = self.model.keypoints.iter().map(|k| self.pose.transform_point(k).coords).collect();
        let lo = pts.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
        let hi = pts.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        (lo, hi)
    }

    /// Mesh vertices in the world frame.
    pub fn world_vertices(&self) -> Vec<Point3> {
        self.model.mesh_vertices.iter().map(|v| self.pose.transform_point(v)).collect()
    }
}

fn yaw_pose(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
    Pose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), Vector3::new(x, y, z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub table: Plane,
    /// Half side of the square table patch centred at the origin.
    pub table_half_extent: f64,
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<Camera>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn new(objects: Vec<SceneObject>, cameras: Vec<Camera>, table_half_extent: f64, seed: u64) -> Self {
        Self {
            table: Plane::new(Vector3::z(), 0.0).expect("unit normal"),
            table_half_extent,
            objects,
            cameras,
            seed,
        }
    }

    pub fn primitives(&self) -> Vec<PrimitiveShape> {
        self.objects.iter().map(|o| o.primitive).collect()
    }

    pub fn models(&self) -> Vec<Model> {
        self.objects.iter().map(|o| o.model.clone()).collect()
    }

    /// Mean of the object centres, or the origin for an empty scene.
    pub fn centroid(&self) -> Point3 {
        if self.objects.is_empty() {
            return Point3::origin();
        }
        let s = self.objects.iter().fold(Vector3::zeros(), |a, o| a + o.pose.translation);
        Point3::from(s / self.objects.len() as f64)
    }

    /// Nearest surface hit along `origin + t·dir` over objects and the table
    /// patch: `(t, object index or None for the table)`.
    pub fn ray_cast(&self, origin: &Point3, dir: &Vector3) -> Option<(f64, Option<usize>)> {
        let mut best: Option<(f64, Option<usize>)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some(t) = ray_primitive(&o.primitive, origin, dir) {
                if best.map_or(true, |(b, _)| t < b) {
                    best = Some((t, Some(i)));
                }
            }
        }
        if let Some(t) = self.table.ray_intersection(origin, dir) {
            let p = origin + dir * t;
            if p.x.abs() <= self.table_half_extent && p.y.abs() <= self.table_half_extent && best.map_or(true, |(b, _)| t < b) {
                best = Some((t, None));
            }
        }
        best
    }
}

/// Cameras on a horizontal arc around `target`, all looking at it.
pub fn camera_arc(target: &Point3, count: usize, radius: f64, height: f64, arc_deg: f64, intrinsics: Intrinsics) -> Vec<Camera> {
    let arc = arc_deg.to_radians();
    (0..count)
        .map(|i| {
            let phi = if count == 1 { 0.0 } else { -arc / 2.0 + arc * i as f64 / (count - 1) as f64 };
            let eye = Point3::new(target.x + radius * phi.cos(), target.y + radius * phi.sin(), target.z + height);
            Camera {
                pose: look_at(&eye, target, &Vector3::z()),
                intrinsics,
            }
        })
        .collect()
}

/// Rejection-sampled scene with pairwise disjoint object footprints.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 10));
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let h = cfg.workspace_half_extent;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for index in 0..count {
        let cylinder = rng.random_bool(cfg.cylinder_fraction);
        let mesh_seed = derive_seed(seed, index as u64 + 1, 11);
        let mut placed = None;
        for _ in 0..cfg.placement_attempts {
            let (x, y, yaw) = (rng.random_range(-h..=h), rng.random_range(-h..=h), rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            let obj = if cylinder {
                let r = rng.random_range(cfg.cylinder_radius[0]..=cfg.cylinder_radius[1]);
                let ht = rng.random_range(cfg.cylinder_height[0]..=cfg.cylinder_height[1]);
                SceneObject::cylinder(format!("cylinder_{index}"), r, ht, x, y, yaw, cfg.mesh_vertices, mesh_seed)
            } else {
                let e = Vector3::from_fn(|_, _| rng.random_range(cfg.cuboid_edge[0]..=cfg.cuboid_edge[1]));
                SceneObject::cuboid(format!("cuboid_{index}"), e, x, y, yaw, cfg.mesh_vertices, mesh_seed)
            };
            let (lo, hi) = obj.aabb();
            let m = cfg.placement_margin;
            let clear = objects.iter().all(|o| {
                let (a, b) = o.aabb();
                lo.x > b.x + m || hi.x + m < a.x || lo.y > b.y + m || hi.y + m < a.y
            });
            if clear {
                placed = Some(obj);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(SynthError::PlacementFailure {
                    index,
                    attempts: cfg.placement_attempts,
                })
            }
        }
    }
    let mut scene = SyntheticScene::new(objects, Vec::new(), h + 0.15, seed);
    let centre = {
        let c = scene.centroid();
        Point3::new(c.x, c.y, 0.0)
    };
    scene.cameras = camera_arc(&centre, cfg.camera_count, cfg.camera_radius, cfg.camera_height, cfg.camera_arc_deg, cfg.intrinsics());
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionNoise {
    /// Pixels; standard deviation per image axis.
    pub pixel_sigma: f64,
    pub dropout_prob: f64,
    /// Pixels; confidence is `exp(-|e| / tau)` for pixel error `e`.
    pub confidence_tau: f64,
    /// Draws confidences uniformly instead, independent of the error.
    pub adversarial: bool,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        Self {
            pixel_sigma: 2.0,
            dropout_prob: 0.0,
            confidence_tau: 5.0,
            adversarial: false,
        }
    }
}

/// Keypoint detections of every object in every camera. Keypoints that fall
/// behind the camera or outside the image are absent, and a detection with
/// no keypoint left is omitted. Occlusion between objects is not modelled.
pub fn render_detections(scene: &SyntheticScene, noise: &DetectionNoise, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 20));
    let mut out = Vec::new();
    for (c, cam) in scene.cameras.iter().enumerate() {
        let view = cam.pose.inverse();
        for obj in &scene.objects {
            let mut pixels = Vec::with_capacity(obj.model.keypoint_count());
            let mut confs = Vec::with_capacity(obj.model.keypoint_count());
            for kp in &obj.model.keypoints {
                let pc = view.transform_point(&obj.pose.transform_point(kp));
                let e = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)) * noise.pixel_sigma;
                let u: f64 = rng.random();
                let drop = rng.random_bool(noise.dropout_prob.clamp(0.0, 1.0));
                let px = cam.intrinsics.project_camera_point(&pc).ok().map(|p| p + e);
                match px {
                    Some(p) if !drop && cam.intrinsics.contains(&p) => {
                        pixels.push(Some(p));
                        confs.push(if noise.adversarial { u } else { (-e.norm() / noise.confidence_tau).exp() });
                    }
                    _ => {
                        pixels.push(None);
                        confs.push(0.0);
                    }
                }
            }
            if pixels.iter().all(|p| p.is_none()) {
                continue;
            }
            out.push(
                Detection::new(view_name(c), obj.model.class_id.clone(), pixels, confs, cam.pose, cam.intrinsics)
                    .expect("synthetic detection is well formed"),
            );
        }
    }
    out
}

pub fn view_name(index: usize) -> String {
    format!("view_{index:03}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudConfig {
    /// Points per square meter of surface.
    pub density: f64,
    /// Meters; Gaussian offset along the surface normal.
    pub noise_sigma: f64,
    /// Keep only points seen unoccluded by at least one camera.
    pub visibility: bool,
    pub include_table: bool,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            density: 300_000.0,
            noise_sigma: 0.001,
            visibility: true,
            include_table: true,
        }
    }
}

/// A primitive in its own frame, for sampling.
#[derive(Debug, Clone, Copy)]
enum LocalShape {
    Box(Vector3),
    Cylinder(f64, f64),
}

fn local_shape(kind: &ShapeKind) -> LocalShape {
    match *kind {
        ShapeKind::Cuboid { extents, .. } => LocalShape::Box(extents),
        ShapeKind::Cylinder { radius, height, .. } => LocalShape::Cylinder(radius, height),
    }
}

fn surface_area(shape: &LocalShape) -> f64 {
    match *shape {
        LocalShape::Box(e) => 2.0 * (e.x * e.y + e.y * e.z + e.x * e.z),
        LocalShape::Cylinder(r, h) => std::f64::consts::TAU * r * h + 2.0 * std::f64::consts::PI * r * r,
    }
}

/// Area-uniform surface point and outward normal in the shape frame.
fn sample_local(shape: &LocalShape, rng: &mut ChaCha8Rng) -> (Point3, Vector3) {
    match *shape {
        LocalShape::Box(e) => {
            let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
            let total = 2.0 * (areas[0] + areas[1] + areas[2]);
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (a, area) in areas.iter().enumerate() {
                if pick < 2.0 * area {
                    axis = a;
                    break;
                }
                pick -= 2.0 * area;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let h = e / 2.0;
            let mut p = Vector3::new(rng.random_range(-h.x..=h.x), rng.random_range(-h.y..=h.y), rng.random_range(-h.z..=h.z));
            p[axis] = sign * h[axis];
            let mut n = Vector3::zeros();
            n[axis] = sign;
            (Point3::from(p), n)
        }
        LocalShape::Cylinder(r, h) => {
            let lateral = std::f64::consts::TAU * r * h;
            let cap = std::f64::consts::PI * r * r;
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let pick = rng.random_range(0.0..lateral + 2.0 * cap);
            if pick < lateral {
                let z = rng.random_range(-h / 2.0..=h / 2.0);
                (Point3::new(r * th.cos(), r * th.sin(), z), Vector3::new(th.cos(), th.sin(), 0.0))
            } else {
                let rr = r * rng.random_range(0.0f64..=1.0).sqrt();
                let sign = if pick < lateral + cap { 1.0 } else { -1.0 };
                (Point3::new(rr * th.cos(), rr * th.sin(), sign * h / 2.0), Vector3::new(0.0, 0.0, sign))
            }
        }
    }
}

/// Entry parameter of the ray into the solid, `None` when it misses or the
/// solid is behind the origin.
fn ray_primitive(shape: &PrimitiveShape, origin: &Point3, dir: &Vector3) -> Option<f64> {
    let inv = shape.pose().inverse();
    let o = inv.transform_point(origin).coords;
    let d = inv.transform_vector(dir);
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut clip = |o: f64, d: f64, lo: f64, hi: f64| -> bool {
        if d.abs() < 1e-300 {
            return o >= lo && o <= hi;
        }
        let (a, b) = ((lo - o) / d, (hi - o) / d);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
        t0 <= t1
    };
    match shape.kind {
        ShapeKind::Cuboid { extents, .. } => {
            let h = extents / 2.0;
            for a in 0..3 {
                if !clip(o[a], d[a], -h[a], h[a]) {
                    return None;
                }
            }
        }
        ShapeKind::Cylinder { radius, height, .. } => {
            if !clip(o.z, d.z, -height / 2.0, height / 2.0) {
                return None;
            }
            let a = d.x * d.x + d.y * d.y;
            let c = o.x * o.x + o.y * o.y - radius * radius;
            if a < 1e-300 {
                if c > 0.0 {
                    return None;
                }
            } else {
                let b = o.x * d.x + o.y * d.y;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                t0 = t0.max((-b - s) / a);
                t1 = t1.min((-b + s) / a);
                if t0 > t1 {
                    return None;
                }
            }
        }
    }
    if t1 < 0.0 {
        None
    } else {
        Some(t0.max(0.0))
    }
}

/// Uniform surface samples of every object and optionally the table patch,
/// `round(density · area)` per surface before visibility culling. Colours
/// encode the source (grey table, one hue per object).
pub fn sample_surface_cloud(scene: &SyntheticScene, cfg: &CloudConfig, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 30));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let keep = |p: Point3, n: Vector3, rgb: [u8; 3], points: &mut Vec<Point3>, colors: &mut Vec<[u8; 3]>, rng: &mut ChaCha8Rng| {
        let offset = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        if !cfg.visibility || visible(scene, &p, &n) {
            points.push(p + n * offset);
            colors.push(rgb);
        }
    };
    if cfg.include_table {
        let h = scene.table_half_extent;
        let count = (cfg.density * 4.0 * h * h).round() as usize;
        for _ in 0..count {
            let p = Point3::new(rng.random_range(-h..=h), rng.random_range(-h..=h), 0.0);
            keep(p, Vector3::z(), [128, 128, 128], &mut points, &mut colors, &mut rng);
        }
    }
    for (i, obj) in scene.objects.iter().enumerate() {
        let local = local_shape(&obj.primitive.kind);
        let count = (cfg.density * surface_area(&local)).round() as usize;
        let rgb = object_color(i);
        let pose = obj.pose;
        for _ in 0..count {
            let (p, n) = sample_local(&local, &mut rng);
            keep(pose.transform_point(&p), pose.transform_vector(&n), rgb, &mut points, &mut colors, &mut rng);
        }
    }
    let mut cloud = PointCloud::new(points);
    cloud.colors = Some(colors);
    cloud
}

pub fn object_color(index: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] = [[220, 60, 60], [60, 180, 75], [60, 100, 220], [240, 200, 40], [170, 70, 200], [70, 200, 200]];
    PALETTE[index % PALETTE.len()]
}

/// Front-facing, inside the image, and unoccluded from some camera.
fn visible(scene: &SyntheticScene, p: &Point3, n: &Vector3) -> bool {
    scene.cameras.iter().any(|cam| {
        let eye = Point3::from(cam.pose.translation);
        let to_eye = eye - p;
        if n.dot(&to_eye) <= 0.0 {
            return false;
        }
        let pc = cam.pose.inverse().transform_point(p);
        match cam.intrinsics.project_camera_point(&pc) {
            Ok(px) if cam.intrinsics.contains(&px) => {}
            _ => return false,
        }
        let dist = to_eye.norm();
        let dir = -to_eye / dist;
        match scene.ray_cast(&eye, &dir) {
            Some((t, _)) => t >= dist - 1e-6,
            None => true,
        }
    })
}

/// True depth and per-pixel object index (`None` for table or background)
/// seen from one camera, by ray casting each pixel centre.
pub fn render_view(scene: &SyntheticScene, camera: &Camera) -> (DepthMap, Vec<Option<usize>>) {
    let k = &camera.intrinsics;
    let mut depth = DepthMap::invalid(k.width, k.height);
    let mut labels = vec![None; (k.width * k.height) as usize];
    let eye = Point3::from(camera.pose.translation);
    for y in 0..k.height {
        for x in 0..k.width {
            let ray_c = k.ray(&Point2::new(x as f64, y as f64));
            let dir = camera.pose.transform_vector(&ray_c);
            // `ray_c` has unit z, so the ray parameter is the optical depth.
            if let Some((t, id)) = scene.ray_cast(&eye, &dir) {
                depth.set(x, y, t);
                labels[depth.index(x, y)] = id;
            }
        }
    }
    (depth, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskCorruption {
    /// Fraction of each mask's pixels moved to uniformly random image pixels.
    pub pixel_fraction: f64,
    /// Probability that an instance reports the other class.
    pub label_flip_prob: f64,
    /// Instance confidence range; drawn uniformly.
    pub confidence: [f64; 2],
}

impl Default for MaskCorruption {
    fn default() -> Self {
        Self {
            pixel_fraction: 0.1,
            label_flip_prob: 0.1,
            confidence: [0.6, 1.0],
        }
    }
}

/// Per-view instance segmentations with true depth, corrupted as configured.
/// Objects with no visible pixel in a view produce no instance there.
pub fn render_segmentations(scene: &SyntheticScene, corruption: &MaskCorruption, seed: u64) -> Vec<SegmentedView> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 40));
    scene
        .cameras
        .iter()
        .enumerate()
        .map(|(c, cam)| {
            let (depth, labels) = render_view(scene, cam);
            let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
            let mut instances = Vec::new();
            for (i, obj) in scene.objects.iter().enumerate() {
                let mut pixels: Vec<(u32, u32)> = (0..labels.len())
                    .filter(|&j| labels[j] == Some(i))
                    .map(|j| (j as u32 % w, j as u32 / w))
                    .collect();
                if pixels.is_empty() {
                    continue;
                }
                for px in pixels.iter_mut() {
                    if rng.random_bool(corruption.pixel_fraction.clamp(0.0, 1.0)) {
                        *px = (rng.random_range(0..w), rng.random_range(0..h));
                    }
                }
                pixels.sort_unstable_by_key(|&(x, y)| (y, x));
                pixels.dedup();
                let mut class = obj.shape_class();
                if rng.random_bool(corruption.label_flip_prob.clamp(0.0, 1.0)) {
                    class = class.other();
                }
                let confidence = rng.random_range(corruption.confidence[0]..=corruption.confidence[1]);
                instances.push(SegmentationInstance {
                    view_id: view_name(c),
                    shape_class: class,
                    pixels,
                    confidence,
                });
            }
            SegmentedView {
                view_id: view_name(c),
                camera_pose: cam.pose,
                intrinsics: cam.intrinsics,
                depth,
                instances,
            }
        })
        .collect()
}
