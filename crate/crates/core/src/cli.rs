//! The `mvscene` command-line tool.
//!
//! Every subcommand reads its inputs from `--input-dir` (defaulting to the
//! output directory) under fixed file names, so the stages chain without
//! extra flags:
//!
//! ```text
//! mvscene --seed 42 --output-dir run synth
//! mvscene --output-dir run refine-depth
//! mvscene --output-dir run fit-primitives
//! mvscene --output-dir run fuse-poses
//! mvscene --output-dir run evaluate
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 bad or missing input data,
//! 3 internal failure. Logs go to standard error only.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::depth::{virtualize_depth, DepthMap, PointCloud};
use crate::fusion::{derive_seed, fuse_object_poses};
use crate::io::{
    self, FusedPoseRecord, InstanceRecord, IoError, ModelRecord, PipelineConfig, PlyFormat, PrimitiveRecord, SceneObjectRecord,
    SceneRecord, SegmentationRecord, ShapeRecord, ViewRecord,
};
use crate::metrics::{
    accuracy_curve, add_metric, add_s_metric, assign_predictions, detection_rate, filter_gt_vertices, AccuracyCurve, Covers,
    PosedModel,
};
use crate::shapes::{fit_primitive, multiview_vote, SegmentationInstance, SegmentedView};
use crate::synth::{generate_scene, render_detections, render_segmentations, sample_surface_cloud};
use crate::{Intrinsics, Model, Pose};

pub const SCENE_FILE: &str = "scene.json";
pub const MODELS_FILE: &str = "models.json";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const SEGMENTATION_FILE: &str = "segmentation.json";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const REFINED_CLOUD_FILE: &str = "cloud_refined.ply";
pub const PLANE_FILE: &str = "plane.json";
pub const DEPTH_DIR: &str = "depth";
pub const PRIMITIVES_FILE: &str = "primitives.json";
pub const POSES_FILE: &str = "poses.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "pose_curve.csv";

/// A fitted shape whose RMS exceeds this fraction of the inlier tolerance is
/// flagged as low confidence.
const LOW_CONFIDENCE_RMS_FRACTION: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "mvscene", version, about = "Multi-view tabletop scene understanding")]
pub struct Cli {
    /// TOML pipeline configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    /// Directory holding the inputs; defaults to the output directory.
    #[arg(long, global = true)]
    pub input_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with cloud, detections and masks.
    Synth,
    /// Render and refine virtual depth maps from the cloud and cameras.
    RefineDepth,
    /// Vote segmentations across views and fit cuboids and cylinders.
    FitPrimitives,
    /// Fuse per-view keypoint detections into object poses.
    FusePoses,
    /// Score poses and primitives against the synthetic ground truth.
    Evaluate,
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            IoError::Io { .. } => CliError::Data(e.to_string()),
            other => CliError::Usage(other.to_string()),
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let out = cli.output_dir.as_path();
    let input = cli.input_dir.as_deref().unwrap_or(out);
    match cli.command {
        Command::Synth => synth(&cfg, out),
        Command::RefineDepth => refine_depth(&cfg, input, out),
        Command::FitPrimitives => fit_primitives(&cfg, input, out),
        Command::FusePoses => fuse_poses(&cfg, input, out),
        Command::Evaluate => evaluate(&cfg, input, out),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    io::write_json(path, value).map_err(internal)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    io::read_json(path).map_err(data)
}

fn read_views(dir: &Path) -> Result<Vec<(String, Pose, Intrinsics)>, CliError> {
    let records: Vec<ViewRecord> = read_json(&dir.join(CAMERAS_FILE))?;
    records
        .iter()
        .map(|r| r.decode().map(|(p, k)| (r.view_id.clone(), p, k)).map_err(data))
        .collect()
}

fn read_models(dir: &Path) -> Result<Vec<Model>, CliError> {
    let records: Vec<ModelRecord> = read_json(&dir.join(MODELS_FILE))?;
    records.iter().map(|m| m.to_model().map_err(data)).collect()
}

fn depth_path(dir: &Path, view_id: &str, ext: &str) -> PathBuf {
    dir.join(DEPTH_DIR).join(format!("{view_id}.{ext}"))
}

fn synth(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    let s = &cfg.synth;
    let scene = generate_scene(&s.scene, cfg.seed).map_err(data)?;
    info!("generated {} objects, {} cameras", scene.objects.len(), scene.cameras.len());
    let views: Vec<ViewRecord> = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| ViewRecord::new(crate::synth::view_name(i), &c.pose, &c.intrinsics))
        .collect();
    let record = SceneRecord {
        seed: cfg.seed,
        table_plane: [scene.table.normal.x, scene.table.normal.y, scene.table.normal.z, scene.table.offset],
        table_half_extent: scene.table_half_extent,
        objects: scene
            .objects
            .iter()
            .map(|o| SceneObjectRecord {
                class_id: o.model.class_id.clone(),
                shape_class: o.shape_class(),
                pose: io::PoseRecord::from_pose(&o.pose),
                shape: ShapeRecord::from_kind(&o.primitive.kind),
            })
            .collect(),
        views: views.clone(),
    };
    write_json(&out.join(SCENE_FILE), &record)?;
    let models: Vec<ModelRecord> = scene.objects.iter().map(|o| ModelRecord::from_model(&o.model)).collect();
    write_json(&out.join(MODELS_FILE), &models)?;
    write_json(&out.join(CAMERAS_FILE), &views)?;

    let dets = render_detections(&scene, &s.detections, cfg.seed);
    io::save_detections(&out.join(DETECTIONS_FILE), &dets).map_err(internal)?;

    let cloud = sample_surface_cloud(&scene, &s.cloud, cfg.seed);
    io::save_point_cloud(&out.join(CLOUD_FILE), &cloud, PlyFormat::BinaryLittleEndian).map_err(internal)?;

    let segs: Vec<SegmentationRecord> = render_segmentations(&scene, &s.masks, cfg.seed)
        .into_iter()
        .map(|v| SegmentationRecord {
            view_id: v.view_id,
            instances: v
                .instances
                .iter()
                .map(|i| InstanceRecord::from_pixels(i.shape_class, i.confidence, &i.pixels))
                .collect(),
        })
        .collect();
    write_json(&out.join(SEGMENTATION_FILE), &segs)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneRecord {
    normal: [f64; 3],
    offset: f64,
}

fn refine_depth(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let cloud = io::load_point_cloud(&input.join(CLOUD_FILE)).map_err(data)?;
    let views = read_views(input)?;
    let Some((_, _, k)) = views.first() else {
        return Err(CliError::Data("no cameras".into()));
    };
    if views.iter().any(|v| v.2 != *k) {
        return Err(CliError::Data("all views must share intrinsics".into()));
    }
    let poses: Vec<Pose> = views.iter().map(|v| v.1).collect();
    let result = virtualize_depth(&cloud, &poses, k, &cfg.depth, derive_seed(cfg.seed, 0, 70)).map_err(data)?;
    let plane = PlaneRecord {
        normal: [result.plane.normal.x, result.plane.normal.y, result.plane.normal.z],
        offset: result.plane.offset,
    };
    write_json(&out.join(PLANE_FILE), &plane)?;
    io::save_point_cloud(&out.join(REFINED_CLOUD_FILE), &result.cloud, PlyFormat::BinaryLittleEndian).map_err(internal)?;
    for ((id, _, _), map) in views.iter().zip(&result.maps) {
        io::write_bytes(&depth_path(out, id, "depth"), &io::encode_depth_raw(map)).map_err(internal)?;
        io::write_bytes(&depth_path(out, id, "png"), &io::encode_depth_png(map).map_err(internal)?).map_err(internal)?;
    }
    info!("refined {} depth maps", result.maps.len());
    Ok(())
}

fn load_segmented_views(input: &Path) -> Result<Vec<SegmentedView>, CliError> {
    let views = read_views(input)?;
    let segs: Vec<SegmentationRecord> = read_json(&input.join(SEGMENTATION_FILE))?;
    segs.iter()
        .map(|s| {
            let (_, pose, k) = views
                .iter()
                .find(|v| v.0 == s.view_id)
                .ok_or_else(|| CliError::Data(format!("segmentation view {} has no camera", s.view_id)))?;
            let depth: DepthMap = io::decode_depth_raw(&io::read_bytes(&depth_path(input, &s.view_id, "depth")).map_err(data)?).map_err(data)?;
            if depth.width != k.width || depth.height != k.height {
                return Err(CliError::Data(format!("depth map of {} does not match its camera", s.view_id)));
            }
            Ok(SegmentedView {
                view_id: s.view_id.clone(),
                camera_pose: *pose,
                intrinsics: *k,
                depth,
                instances: s
                    .instances
                    .iter()
                    .map(|i| SegmentationInstance {
                        view_id: s.view_id.clone(),
                        shape_class: i.shape_class,
                        pixels: i.pixels(),
                        confidence: i.confidence,
                    })
                    .collect(),
            })
        })
        .collect()
}

fn fit_primitives(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let views = load_segmented_views(input)?;
    let sets = multiview_vote(&views, &cfg.shapes);
    let mut records = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        match fit_primitive(&set.points, set.shape_class, &cfg.shapes, derive_seed(cfg.seed, i as u64, 60)) {
            Ok(shape) => records.push(PrimitiveRecord {
                shape: ShapeRecord::from_kind(&shape.kind),
                inlier_count: shape.inlier_count,
                fit_rms: shape.fit_rms,
                point_count: set.points.len(),
                views: set.views.clone(),
                low_confidence: shape.fit_rms > LOW_CONFIDENCE_RMS_FRACTION * cfg.shapes.fit_tolerance,
            }),
            Err(e) => warn!("set {i} ({} points) not fitted: {e}", set.points.len()),
        }
    }
    info!("{} voted sets, {} primitives", sets.len(), records.len());
    write_json(&out.join(PRIMITIVES_FILE), &records)
}

fn fuse_poses(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let dets = io::load_detections(&input.join(DETECTIONS_FILE)).map_err(data)?;
    let models = read_models(input)?;
    let mut records = Vec::new();
    for (m, model) in models.iter().enumerate() {
        for e in fuse_object_poses(&dets, model, &cfg.fusion, derive_seed(cfg.seed, m as u64, 50)) {
            records.push(FusedPoseRecord::from_estimate(&e));
        }
    }
    info!("{} fused poses", records.len());
    write_json(&out.join(POSES_FILE), &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPoseResult {
    pub class_id: String,
    /// "add" or "add-s".
    pub metric: String,
    /// `None` when the object has no estimate.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub objects: Vec<ObjectPoseResult>,
    pub estimates: usize,
    pub curve: AccuracyCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveReport {
    pub fitted: usize,
    pub matched: usize,
    pub correct_labels: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub objects: usize,
    pub poses: PoseReport,
    pub primitives: Option<PrimitiveReport>,
    /// Coverage by primitives and posed models together.
    pub detection_rate: f64,
}

fn evaluate(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let ev = &cfg.evaluation;
    let scene: SceneRecord = read_json(&input.join(SCENE_FILE))?;
    let models = read_models(input)?;
    let poses: Vec<FusedPoseRecord> = read_json(&input.join(POSES_FILE))?;
    let primitives: Option<Vec<PrimitiveRecord>> = {
        let p = input.join(PRIMITIVES_FILE);
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let cloud: Option<PointCloud> = {
        let p = input.join(CLOUD_FILE);
        if p.exists() {
            Some(io::load_point_cloud(&p).map_err(data)?)
        } else {
            None
        }
    };

    let mut gt = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let model = models
            .iter()
            .find(|m| m.class_id == o.class_id)
            .ok_or_else(|| CliError::Data(format!("no model for ground-truth object {}", o.class_id)))?;
        gt.push((model, o.pose.to_pose().map_err(data)?, o));
    }

    let mut estimates: Vec<(String, Pose)> = Vec::with_capacity(poses.len());
    for p in &poses {
        estimates.push((p.class_id.clone(), p.pose.to_pose().map_err(data)?));
    }
    let mut objects = Vec::new();
    for (model, gt_pose, _) in &gt {
        let metric = if model.symmetric { add_s_metric } else { add_metric };
        let best = estimates
            .iter()
            .filter(|(c, _)| *c == model.class_id)
            .map(|(_, p)| metric(p, gt_pose, &model.mesh_vertices))
            .min_by(f64::total_cmp);
        objects.push(ObjectPoseResult {
            class_id: model.class_id.clone(),
            metric: if model.symmetric { "add-s" } else { "add" }.into(),
            error: best,
        });
    }
    let errors: Vec<f64> = objects.iter().map(|o| o.error.unwrap_or(f64::INFINITY)).collect();
    let curve = accuracy_curve(&errors, ev.curve_max_threshold, ev.curve_steps);
    io::write_bytes(&out.join(CURVE_FILE), curve.to_csv().as_bytes()).map_err(internal)?;

    let gt_points: Vec<Vec<crate::Point3>> = gt
        .iter()
        .map(|(m, p, _)| {
            let world: Vec<_> = m.mesh_vertices.iter().map(|v| p.transform_point(v)).collect();
            match &cloud {
                Some(c) => filter_gt_vertices(&world, &c.points, ev.gt_vertex_epsilon),
                None => world,
            }
        })
        .collect();
    let posed: Vec<PosedModel> = estimates
        .iter()
        .filter_map(|(c, p)| models.iter().find(|m| m.class_id == *c).map(|m| PosedModel::new(p, &m.mesh_vertices)))
        .collect();

    let mut fitted = Vec::new();
    let primitive_report = match &primitives {
        Some(recs) => {
            for r in recs {
                fitted.push(r.to_primitive().map_err(data)?);
            }
            let centres: Vec<crate::Point3> = fitted.iter().map(|s| crate::Point3::from(s.pose().translation)).collect();
            let gt_centres: Vec<crate::Point3> = gt.iter().map(|(_, p, _)| crate::Point3::from(p.translation)).collect();
            let a = assign_predictions(&centres, &gt_centres, ev.assignment_distance, |i, g| (centres[i] - gt_centres[g]).norm());
            let correct = a
                .matches
                .iter()
                .filter(|m| fitted[m.prediction].class() == gt[m.ground_truth].2.shape_class)
                .count();
            let covers: Vec<&dyn Covers> = fitted.iter().map(|s| s as &dyn Covers).collect();
            Some(PrimitiveReport {
                fitted: fitted.len(),
                matched: a.matches.len(),
                correct_labels: correct,
                false_positives: a.false_positives.len(),
                false_negatives: a.false_negatives.len(),
                detection_rate: detection_rate(&covers, &gt_points, ev.coverage_tolerance),
            })
        }
        None => None,
    };
    let mut all: Vec<&dyn Covers> = fitted.iter().map(|s| s as &dyn Covers).collect();
    all.extend(posed.iter().map(|p| p as &dyn Covers));
    let report = Report {
        seed: scene.seed,
        objects: gt.len(),
        poses: PoseReport {
            objects,
            estimates: estimates.len(),
            curve,
        },
        primitives: primitive_report,
        detection_rate: detection_rate(&all, &gt_points, ev.coverage_tolerance),
    };
    info!("pose AUC {:.4}", report.poses.curve.auc);
    write_json(&out.join(REPORT_FILE), &report)
}
