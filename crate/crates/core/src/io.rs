//! File formats: PLY clouds, JSON records, depth rasters and the TOML
//! pipeline configuration.
//!
//! Poses are written as a unit quaternion in `[w, x, y, z]` order plus a
//! translation; rotation matrices are not accepted. Floats are written in
//! shortest round-trip form, so loading and re-saving any file written here
//! reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Quaternion, UnitQuaternion};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{DepthConfig, DepthMap, PointCloud};
use crate::fusion::{DetectionWeights, FusedEstimate, FusionConfig, Provenance};
use crate::metrics::EvalConfig;
use crate::shapes::{PrimitiveShape, ShapeClass, ShapeConfig, ShapeKind};
use crate::synth::{CloudConfig, DetectionNoise, MaskCorruption, SceneConfig};
use crate::{Detection, Intrinsics, Model, Point3, Pose, Vector3};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        context: String,
        line: Option<usize>,
        message: String,
    },
    #[error("invalid value: {0}")]
    Invalid(String),
}

impl IoError {
    fn parse(context: &str, line: Option<usize>, message: impl Into<String>) -> Self {
        IoError::Parse {
            context: context.to_string(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Parses an ASCII or binary little-endian PLY with a `vertex` element
/// holding `x, y, z` and optionally `red, green, blue`. Other properties and
/// elements are skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    const CTX: &str = "PLY";
    let mut cursor = Cursor::new(bytes);
    let mut line_no = 0usize;
    let mut next_line = |cursor: &mut Cursor<&[u8]>| -> Result<(usize, String)> {
        let mut buf = Vec::new();
        let n = cursor
            .read_until(b'\n', &mut buf)
            .map_err(|e| IoError::parse(CTX, Some(line_no + 1), e.to_string()))?;
        line_no += 1;
        if n == 0 {
            return Err(IoError::parse(CTX, Some(line_no), "unexpected end of header"));
        }
        let s = String::from_utf8(buf).map_err(|_| IoError::parse(CTX, Some(line_no), "header is not UTF-8"))?;
        Ok((line_no, s.trim_end_matches(['\n', '\r']).to_string()))
    };

    let (l, magic) = next_line(&mut cursor)?;
    if magic.trim() != "ply" {
        return Err(IoError::parse(CTX, Some(l), "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let header_end_line;
    loop {
        let (l, line) = next_line(&mut cursor)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, ver] => {
                if *ver != "1.0" {
                    return Err(IoError::parse(CTX, Some(l), format!("unsupported version {ver}")));
                }
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(IoError::parse(CTX, Some(l), format!("unsupported format '{other}'"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| IoError::parse(CTX, Some(l), format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ct, it, _name] => {
                let (Some(ct), Some(it)) = (Scalar::parse(ct), Scalar::parse(it)) else {
                    return Err(IoError::parse(CTX, Some(l), "unknown list property type"));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| IoError::parse(CTX, Some(l), "property before any element"))?
                    .properties
                    .push(Property::List(ct, it));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| IoError::parse(CTX, Some(l), format!("unknown property type '{ty}'")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| IoError::parse(CTX, Some(l), "property before any element"))?
                    .properties
                    .push(Property::Scalar(name.to_string(), ty));
            }
            ["end_header"] => {
                header_end_line = l;
                break;
            }
            _ => return Err(IoError::parse(CTX, Some(l), format!("unrecognised header line '{line}'"))),
        }
    }
    let format = format.ok_or_else(|| IoError::parse(CTX, Some(header_end_line), "missing format line"))?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| IoError::parse(CTX, Some(header_end_line), "no vertex element"))?;
    let vertex = &elements[vi];
    let find = |n: &str| {
        vertex
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar(name, _) if name == n))
    };
    let (Some(xi), Some(yi), Some(zi)) = (find("x"), find("y"), find("z")) else {
        return Err(IoError::parse(CTX, Some(header_end_line), "vertex element lacks x, y or z"));
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };

    let mut points = Vec::new();
    let mut colors: Vec<[u8; 3]> = Vec::new();
    let mut push = |vals: &[f64]| {
        points.push(Point3::new(vals[xi], vals[yi], vals[zi]));
        if let Some([r, g, b]) = rgb {
            colors.push([vals[r] as u8, vals[g] as u8, vals[b] as u8]);
        }
    };

    match format {
        PlyFormat::Ascii => {
            let mut rest = String::new();
            cursor
                .read_to_string(&mut rest)
                .map_err(|_| IoError::parse(CTX, Some(header_end_line + 1), "body is not UTF-8"))?;
            let mut lines = rest.lines().enumerate().map(|(i, s)| (header_end_line + 1 + i, s));
            for (ei, el) in elements.iter().enumerate() {
                if ei > vi {
                    break;
                }
                for _ in 0..el.count {
                    let (l, text) = lines
                        .next()
                        .ok_or_else(|| IoError::parse(CTX, None, format!("truncated body in element '{}'", el.name)))?;
                    if ei < vi {
                        continue;
                    }
                    let tokens: Vec<&str> = text.split_whitespace().collect();
                    if el.properties.iter().any(|p| matches!(p, Property::List(..))) {
                        return Err(IoError::parse(CTX, Some(l), "list properties on vertices are not supported"));
                    }
                    if tokens.len() != el.properties.len() {
                        return Err(IoError::parse(
                            CTX,
                            Some(l),
                            format!("expected {} values, found {}", el.properties.len(), tokens.len()),
                        ));
                    }
                    let vals = tokens
                        .iter()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<Vec<f64>, _>>()
                        .map_err(|_| IoError::parse(CTX, Some(l), "non-numeric value"))?;
                    push(&vals);
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let body = &bytes[cursor.position() as usize..];
            let mut at = 0usize;
            let truncated = || IoError::parse(CTX, None, "truncated binary body");
            for (ei, el) in elements.iter().enumerate() {
                if ei > vi {
                    break;
                }
                for _ in 0..el.count {
                    let mut vals = Vec::with_capacity(el.properties.len());
                    for p in &el.properties {
                        match p {
                            Property::Scalar(_, ty) => {
                                let b = body.get(at..at + ty.size()).ok_or_else(truncated)?;
                                vals.push(ty.read_le(b));
                                at += ty.size();
                            }
                            Property::List(ct, it) => {
                                let b = body.get(at..at + ct.size()).ok_or_else(truncated)?;
                                let n = ct.read_le(b) as usize;
                                at += ct.size() + n * it.size();
                                vals.push(f64::NAN);
                            }
                        }
                    }
                    if ei == vi {
                        push(&vals);
                    }
                }
            }
        }
    }
    let mut cloud = PointCloud::new(points);
    if rgb.is_some() {
        cloud.colors = Some(colors);
    }
    Ok(cloud)
}

/// PLY with `double` coordinates and, when present, `uchar` colours.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let c = cloud.colors.as_ref().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{} {} {}", p.x, p.y, p.z);
                if let Some([r, g, b]) = c {
                    let _ = write!(line, " {r} {g} {b}");
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(rgb) = c {
                    out.extend_from_slice(&rgb);
                }
            }
        }
    }
    out
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    parse_ply(&read_bytes(path)?).map_err(|e| match e {
        IoError::Parse { line, message, .. } => IoError::Parse {
            context: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}

pub fn save_point_cloud(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    write_bytes(path, &encode_ply(cloud, format))
}

// ---------------------------------------------------------------- JSON

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("records serialize");
    s.push('\n');
    s
}

pub fn from_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| IoError::parse(context, Some(e.line()), e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| IoError::parse(&path.display().to_string(), None, "not UTF-8"))?;
    from_json(&text, &path.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(p: &Pose) -> Self {
        let q = p.rotation.quaternion();
        Self {
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }

    /// Accepts quaternions within 1e-6 of unit length. One that is already
    /// unit to 1e-12 is taken verbatim so that records round-trip exactly.
    pub fn to_pose(&self) -> Result<Pose> {
        let [w, x, y, z] = self.quaternion;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !(n.is_finite() && (n - 1.0).abs() <= 1e-6) || self.translation.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Invalid(format!("pose quaternion norm {n} is not unit or translation is not finite")));
        }
        let rotation = if (n - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        // Built directly: `Pose::new` would renormalize the verbatim case.
        Ok(Pose {
            rotation,
            translation: Vector3::from(self.translation),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl IntrinsicsRecord {
    pub fn from_intrinsics(k: &Intrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }

    pub fn to_intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height).map_err(|e| IoError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub pose: PoseRecord,
    pub intrinsics: IntrinsicsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub view_id: String,
    pub camera: CameraRecord,
}

impl ViewRecord {
    pub fn new(view_id: impl Into<String>, pose: &Pose, k: &Intrinsics) -> Self {
        Self {
            view_id: view_id.into(),
            camera: CameraRecord {
                pose: PoseRecord::from_pose(pose),
                intrinsics: IntrinsicsRecord::from_intrinsics(k),
            },
        }
    }

    pub fn decode(&self) -> Result<(Pose, Intrinsics)> {
        Ok((self.camera.pose.to_pose()?, self.camera.intrinsics.to_intrinsics()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub view_id: String,
    pub class_id: String,
    pub camera: CameraRecord,
    /// `null` marks an undetected keypoint.
    pub keypoints: Vec<Option<KeypointRecord>>,
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            view_id: d.view_id.clone(),
            class_id: d.class_id.clone(),
            camera: CameraRecord {
                pose: PoseRecord::from_pose(&d.camera_pose),
                intrinsics: IntrinsicsRecord::from_intrinsics(&d.intrinsics),
            },
            keypoints: d
                .keypoint_pixels
                .iter()
                .zip(&d.keypoint_confidences)
                .map(|(p, &c)| p.map(|p| KeypointRecord { u: p.x, v: p.y, confidence: c }))
                .collect(),
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let pixels = self.keypoints.iter().map(|k| k.map(|k| Point2::new(k.u, k.v))).collect();
        let confs = self.keypoints.iter().map(|k| k.map_or(0.0, |k| k.confidence)).collect();
        Detection::new(
            self.view_id.clone(),
            self.class_id.clone(),
            pixels,
            confs,
            self.camera.pose.to_pose()?,
            self.camera.intrinsics.to_intrinsics()?,
        )
        .map_err(|e| IoError::Invalid(e.to_string()))
    }
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let records: Vec<DetectionRecord> = from_json(text, "detections")?;
    records.iter().map(DetectionRecord::to_detection).collect()
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let records: Vec<DetectionRecord> = read_json(path)?;
    records.iter().map(DetectionRecord::to_detection).collect()
}

pub fn save_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let records: Vec<DetectionRecord> = detections.iter().map(DetectionRecord::from_detection).collect();
    write_json(path, &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub class_id: String,
    pub keypoints: Vec<[f64; 3]>,
    pub mesh_vertices: Vec<[f64; 3]>,
    #[serde(default)]
    pub symmetric: bool,
}

impl ModelRecord {
    pub fn from_model(m: &Model) -> Self {
        let arr = |p: &Point3| [p.x, p.y, p.z];
        Self {
            class_id: m.class_id.clone(),
            keypoints: m.keypoints.iter().map(arr).collect(),
            mesh_vertices: m.mesh_vertices.iter().map(arr).collect(),
            symmetric: m.symmetric,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let pts = |v: &[[f64; 3]]| v.iter().map(|a| Point3::new(a[0], a[1], a[2])).collect::<Vec<_>>();
        Model::new(self.class_id.clone(), pts(&self.keypoints), pts(&self.mesh_vertices), self.symmetric)
            .map_err(|e| IoError::Invalid(format!("model {}: {e}", self.class_id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShapeRecord {
    Cuboid { pose: PoseRecord, extents: [f64; 3] },
    Cylinder { pose: PoseRecord, radius: f64, height: f64 },
}

impl ShapeRecord {
    pub fn from_kind(kind: &ShapeKind) -> Self {
        match kind {
            ShapeKind::Cuboid { pose, extents } => ShapeRecord::Cuboid {
                pose: PoseRecord::from_pose(pose),
                extents: [extents.x, extents.y, extents.z],
            },
            ShapeKind::Cylinder { pose, radius, height } => ShapeRecord::Cylinder {
                pose: PoseRecord::from_pose(pose),
                radius: *radius,
                height: *height,
            },
        }
    }

    pub fn to_kind(&self) -> Result<ShapeKind> {
        Ok(match self {
            ShapeRecord::Cuboid { pose, extents } => ShapeKind::Cuboid {
                pose: pose.to_pose()?,
                extents: Vector3::from(*extents),
            },
            ShapeRecord::Cylinder { pose, radius, height } => ShapeKind::Cylinder {
                pose: pose.to_pose()?,
                radius: *radius,
                height: *height,
            },
        })
    }
}

/// A fitted primitive with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveRecord {
    pub shape: ShapeRecord,
    pub inlier_count: usize,
    pub fit_rms: f64,
    pub point_count: usize,
    pub views: Vec<String>,
    /// Set when the fit is poor enough that the shape should not be trusted.
    pub low_confidence: bool,
}

impl PrimitiveRecord {
    pub fn to_primitive(&self) -> Result<PrimitiveShape> {
        Ok(PrimitiveShape {
            kind: self.shape.to_kind()?,
            inlier_count: self.inlier_count,
            fit_rms: self.fit_rms,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedPoseRecord {
    pub class_id: String,
    pub pose: PoseRecord,
    pub objective: f64,
    pub provenance: Provenance,
    pub detection_ids: Vec<String>,
    pub weights: Vec<DetectionWeights>,
    pub lm_iterations: usize,
}

impl FusedPoseRecord {
    pub fn from_estimate(e: &FusedEstimate) -> Self {
        Self {
            class_id: e.class_id.clone(),
            pose: PoseRecord::from_pose(&e.pose),
            objective: e.objective,
            provenance: e.provenance,
            detection_ids: e.detection_ids.clone(),
            weights: e.weights.clone(),
            lm_iterations: e.lm_iterations,
        }
    }
}

/// Ground-truth object of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObjectRecord {
    pub class_id: String,
    pub shape_class: ShapeClass,
    pub pose: PoseRecord,
    pub shape: ShapeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub seed: u64,
    /// `[nx, ny, nz, d]` with `n·x + d = 0`.
    pub table_plane: [f64; 4],
    pub table_half_extent: f64,
    pub objects: Vec<SceneObjectRecord>,
    pub views: Vec<ViewRecord>,
}

/// Run-length encoded instance mask: rows `[y, x_first, x_last]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub shape_class: ShapeClass,
    pub confidence: f64,
    pub runs: Vec<[u32; 3]>,
}

impl InstanceRecord {
    pub fn from_pixels(shape_class: ShapeClass, confidence: f64, pixels: &[(u32, u32)]) -> Self {
        let mut sorted = pixels.to_vec();
        sorted.sort_unstable_by_key(|&(x, y)| (y, x));
        sorted.dedup();
        let mut runs: Vec<[u32; 3]> = Vec::new();
        for (x, y) in sorted {
            match runs.last_mut() {
                Some(r) if r[0] == y && r[2] + 1 == x => r[2] = x,
                _ => runs.push([y, x, x]),
            }
        }
        Self {
            shape_class,
            confidence,
            runs,
        }
    }

    pub fn pixels(&self) -> Vec<(u32, u32)> {
        self.runs.iter().flat_map(|&[y, a, b]| (a..=b).map(move |x| (x, y))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationRecord {
    pub view_id: String,
    pub instances: Vec<InstanceRecord>,
}

// ---------------------------------------------------------------- depth

/// 16-bit grayscale PNG in millimetres; zero marks invalid pixels, as do
/// depths beyond the 16-bit range.
pub fn encode_depth_png(map: &DepthMap) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(map.depth.len() * 2);
    for i in 0..map.depth.len() {
        let mm = if map.valid[i] { (map.depth[i] * 1000.0).round() } else { 0.0 };
        let v = if (1.0..=65535.0).contains(&mm) { mm as u16 } else { 0 };
        data.extend_from_slice(&v.to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width, map.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().map_err(|e| IoError::Invalid(e.to_string()))?;
        w.write_image_data(&data).map_err(|e| IoError::Invalid(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthMap> {
    let bad = |m: String| IoError::parse("depth PNG", None, m);
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(bad("expected 16-bit grayscale".into()));
    }
    let mut map = DepthMap::invalid(info.width, info.height);
    for y in 0..info.height {
        for x in 0..info.width {
            let i = (y * info.width + x) as usize;
            let off = y as usize * info.line_size + 2 * x as usize;
            let v = u16::from_be_bytes([buf[off], buf[off + 1]]);
            if v > 0 {
                map.set(x, y, v as f64 / 1000.0);
            }
            debug_assert_eq!(map.index(x, y), i);
        }
    }
    Ok(map)
}

const RAW_MAGIC: &[u8; 8] = b"MVDEPTH1";

/// Lossless raw depth: magic, little-endian `u32` width and height, then
/// row-major little-endian `f64` with NaN for invalid pixels.
pub fn encode_depth_raw(map: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * map.depth.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&map.width.to_le_bytes());
    out.extend_from_slice(&map.height.to_le_bytes());
    for (d, &v) in map.depth.iter().zip(&map.valid) {
        out.extend_from_slice(&(if v { *d } else { f64::NAN }).to_le_bytes());
    }
    out
}

pub fn decode_depth_raw(bytes: &[u8]) -> Result<DepthMap> {
    let bad = |m: &str| IoError::parse("raw depth", None, m);
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(bad("missing header"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let n = w as usize * h as usize;
    if bytes.len() != 16 + 8 * n {
        return Err(bad("body length does not match the header"));
    }
    let mut map = DepthMap::invalid(w, h);
    for i in 0..n {
        let v = f64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().unwrap());
        if v.is_finite() && v > 0.0 {
            map.set(i as u32 % w, i as u32 / w, v);
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub scene: SceneConfig,
    pub detections: DetectionNoise,
    pub cloud: CloudConfig,
    pub masks: MaskCorruption,
}

/// Every tunable of the pipeline, grouped per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: String,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub depth: DepthConfig,
    pub shapes: ShapeConfig,
    pub evaluation: EvalConfig,
    pub synth: SynthSection,
}

pub const CONFIG_VERSION: &str = "1";

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION.into(),
            seed: 0,
            fusion: FusionConfig::default(),
            depth: DepthConfig::default(),
            shapes: ShapeConfig::default(),
            evaluation: EvalConfig::default(),
            synth: SynthSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(IoError::Invalid(format!("config version '{}' is not supported", self.version)));
        }
        self.fusion.validate().map_err(IoError::Invalid)?;
        self.depth.validate().map_err(IoError::Invalid)?;
        self.shapes.validate().map_err(IoError::Invalid)?;
        self.evaluation.validate().map_err(IoError::Invalid)?;
        self.synth.scene.validate().map_err(|e| IoError::Invalid(e.to_string()))?;
        let d = &self.synth.detections;
        if !(d.pixel_sigma >= 0.0 && (0.0..=1.0).contains(&d.dropout_prob) && d.confidence_tau > 0.0) {
            return Err(IoError::Invalid("synth.detections values out of range".into()));
        }
        let c = &self.synth.cloud;
        if !(c.density > 0.0 && c.noise_sigma >= 0.0) {
            return Err(IoError::Invalid("synth.cloud values out of range".into()));
        }
        let m = &self.synth.masks;
        if !((0.0..=1.0).contains(&m.pixel_fraction)
            && (0.0..=1.0).contains(&m.label_flip_prob)
            && 0.0 <= m.confidence[0]
            && m.confidence[0] <= m.confidence[1]
            && m.confidence[1] <= 1.0)
        {
            return Err(IoError::Invalid("synth.masks values out of range".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            IoError::parse("config", line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|_| IoError::parse(&path.display().to_string(), None, "not UTF-8"))?;
        Self::from_toml(&text).map_err(|e| match e {
            IoError::Parse { line, message, .. } => IoError::Parse {
                context: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        let mut c = PointCloud::new(vec![Point3::new(0.1, -2.5, 3.0), Point3::new(1e-7, 0.3, -0.0), Point3::new(1.0 / 3.0, 2.0, 7.25)]);
        c.colors = Some(vec![[1, 2, 3], [255, 0, 9], [10, 20, 30]]);
        c
    }

    #[test]
    fn ply_round_trips_in_both_formats() {
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let bytes = encode_ply(&cloud(), fmt);
            let back = parse_ply(&bytes).unwrap();
            assert_eq!(back.points, cloud().points);
            assert_eq!(back.colors, cloud().colors);
            assert_eq!(encode_ply(&back, fmt), bytes);
        }
    }

    #[test]
    fn ascii_ply_minimal_and_errors() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";
        assert_eq!(parse_ply(text.as_bytes()).unwrap().len(), 3);
        let bad = "ply\nformat ascii 1.0\nelement vertex 3\nproperty floot x\nend_header\n";
        match parse_ply(bad.as_bytes()) {
            Err(IoError::Parse { line: Some(4), .. }) => {}
            other => panic!("{other:?}"),
        }
        let truncated = &text[..text.len() - 6];
        assert!(matches!(parse_ply(truncated.as_bytes()), Err(IoError::Parse { .. })));
        let bin = encode_ply(&cloud(), PlyFormat::BinaryLittleEndian);
        assert!(matches!(parse_ply(&bin[..bin.len() - 1]), Err(IoError::Parse { .. })));
    }

    #[test]
    fn binary_ply_skips_faces() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(3);
        for i in 0..3i32 {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        let c = parse_ply(&bytes).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.0, 2.0, 3.0)]);
        assert!(c.colors.is_none());
    }

    const ONE: &str = r#"[{"view_id":"v0","class_id":"box","camera":{"pose":{"quaternion":[1,0,0,0],"translation":[0,0,0]},
        "intrinsics":{"fx":500,"fy":500,"cx":320,"cy":240,"width":640,"height":480}},
        "keypoints":[{"u":1.5,"v":2.5,"confidence":0.9},null,{"u":3,"v":4,"confidence":0.5},{"u":3,"v":4,"confidence":0.5}]}]"#;

    #[test]
    fn detections_parse_and_round_trip() {
        let d = parse_detections(ONE).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].keypoint_pixels[1], None);
        assert_eq!(d[0].keypoint_confidences[1], 0.0);
        let records: Vec<DetectionRecord> = d.iter().map(DetectionRecord::from_detection).collect();
        let text = to_json(&records);
        let again: Vec<DetectionRecord> = from_json::<Vec<DetectionRecord>>(&text, "t")
            .unwrap()
            .iter()
            .map(|r| DetectionRecord::from_detection(&r.to_detection().unwrap()))
            .collect();
        assert_eq!(to_json(&again), text);
    }

    #[test]
    fn detection_schema_errors_name_the_field() {
        let missing = ONE.replace("\"view_id\":\"v0\",", "");
        let err = parse_detections(&missing).unwrap_err().to_string();
        assert!(err.contains("view_id"), "{err}");
        let matrix = ONE.replace("\"quaternion\":[1,0,0,0]", "\"matrix\":[1,0,0,0,1,0,0,0,1]");
        let err = parse_detections(&matrix).unwrap_err().to_string();
        assert!(err.contains("matrix"), "{err}");
        let not_unit = ONE.replace("[1,0,0,0]", "[2,0,0,0]");
        assert!(matches!(parse_detections(&not_unit), Err(IoError::Invalid(_))));
    }

    #[test]
    fn depth_formats_round_trip() {
        let mut m = DepthMap::invalid(4, 3);
        m.set(0, 0, 1.234);
        m.set(3, 2, 0.5 + 1e-9);
        let raw = encode_depth_raw(&m);
        let back = decode_depth_raw(&raw).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_depth_raw(&back), raw);
        let png = encode_depth_png(&m).unwrap();
        let p = decode_depth_png(&png).unwrap();
        assert_eq!(p.get(0, 0), Some(1.234));
        assert_eq!(p.get(3, 2), Some(0.5));
        assert_eq!(p.get(1, 1), None);
        assert_eq!(encode_depth_png(&p).unwrap(), png);
    }

    #[test]
    fn config_defaults_and_rejections() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
        let err = PipelineConfig::from_toml("seed = 1\n[fusion]\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, IoError::Parse { line: Some(3), .. }), "{err}");
        assert!(matches!(
            PipelineConfig::from_toml("[fusion]\nstage1_rotation_sigma = -1.0\n"),
            Err(IoError::Invalid(_))
        ));
        let f = PipelineConfig::from_toml("[fusion]\nstage1_rotation_samples = 5\n").unwrap();
        assert_eq!(f.fusion.stage1_rotation_samples, 5);
    }

    #[test]
    fn mask_runs_round_trip() {
        let px = vec![(3, 1), (1, 0), (2, 0), (4, 1), (0, 0), (7, 1)];
        let r = InstanceRecord::from_pixels(ShapeClass::Cylinder, 0.5, &px);
        assert_eq!(r.runs, vec![[0, 0, 2], [1, 3, 4], [1, 7, 7]]);
        let mut sorted = px.clone();
        sorted.sort_by_key(|&(x, y)| (y, x));
        assert_eq!(r.pixels(), sorted);
    }
}
