//! Scene bundles: objects as point samples with per-point shape features and
//! one embedding vector each.
//!
//! The normative exchange format is a single JSON document (see
//! [`load_scene`] / [`save_scene`]). A compact little-endian float32 binary
//! variant with the same schema is available for large scenes; it is lossy
//! (f32) and detected by its magic prefix.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance between a stored centroid and the mean of its points.
pub const CENTROID_TOLERANCE: f64 = 1e-6;

const BINARY_MAGIC: &[u8; 4] = b"SABN";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub objects: Vec<ObjectInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub object_id: String,
    pub label: Option<String>,
    pub centroid: Point3<f64>,
    pub points: Vec<Point3<f64>>,
    pub point_features: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
}

/// One surface sample borrowed from an object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample<'a> {
    pub position: Point3<f64>,
    pub feature: &'a [f64],
    pub owner: &'a str,
    /// Row of the sample within its owner's point list.
    pub index: usize,
}

impl ObjectInstance {
    pub fn mean_point(points: &[Point3<f64>]) -> Point3<f64> {
        if points.is_empty() {
            return Point3::origin();
        }
        let sum = points.iter().fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / points.len() as f64)
    }

    pub fn samples(&self) -> impl Iterator<Item = PointSample<'_>> {
        self.points
            .iter()
            .zip(&self.point_features)
            .enumerate()
            .map(|(index, (p, f))| PointSample {
                position: *p,
                feature: f,
                owner: &self.object_id,
                index,
            })
    }
}

impl SceneBundle {
    pub fn object(&self, id: &str) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    pub fn point_count(&self) -> usize {
        self.objects.iter().map(|o| o.points.len()).sum()
    }

    /// All point positions in object order.
    pub fn all_points(&self) -> Vec<Point3<f64>> {
        self.objects.iter().flat_map(|o| o.points.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub rule: String,
    pub object_id: Option<String>,
    pub point_index: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn new(severity: Severity, rule: &str, object_id: Option<&str>, message: String) -> Self {
        Diagnostic {
            severity,
            rule: rule.to_string(),
            object_id: object_id.map(str::to_string),
            point_index: None,
            message,
        }
    }

    fn at_point(mut self, index: usize) -> Self {
        self.point_index = Some(index);
        self
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev} [{}]", self.rule)?;
        if let Some(id) = &self.object_id {
            write!(f, " object `{id}`")?;
        }
        if let Some(i) = self.point_index {
            write!(f, " point {i}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Checks every bundle invariant and reports one diagnostic per violation.
pub fn validate_scene(scene: &SceneBundle) -> Vec<Diagnostic> {
    use Severity::*;
    let mut out = Vec::new();

    if scene.feature_dim == 0 {
        out.push(Diagnostic::new(Error, "scene.feature_dim", None, "feature_dim must be positive".into()));
    }
    if scene.embedding_dim == 0 {
        out.push(Diagnostic::new(Error, "scene.embedding_dim", None, "embedding_dim must be positive".into()));
    }
    if scene.objects.is_empty() {
        out.push(Diagnostic::new(Error, "scene.objects", None, "scene has no objects".into()));
    }

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (oi, obj) in scene.objects.iter().enumerate() {
        let id = Some(obj.object_id.as_str());
        if let Some(first) = seen.insert(&obj.object_id, oi) {
            out.push(Diagnostic::new(
                Error,
                "object.id.duplicate",
                id,
                format!("object id also used by object #{first}"),
            ));
        }
        if obj.points.is_empty() {
            out.push(Diagnostic::new(Error, "object.points.empty", id, "object has no points".into()));
        }
        if obj.point_features.len() != obj.points.len() {
            out.push(Diagnostic::new(
                Error,
                "object.features.rows",
                id,
                format!(
                    "{} points but {} feature rows",
                    obj.points.len(),
                    obj.point_features.len()
                ),
            ));
        }
        for (pi, p) in obj.points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                out.push(
                    Diagnostic::new(Error, "object.point.finite", id, "non-finite coordinate".into()).at_point(pi),
                );
            }
        }
        for (pi, row) in obj.point_features.iter().enumerate() {
            if row.len() != scene.feature_dim {
                out.push(
                    Diagnostic::new(
                        Error,
                        "object.feature.dim",
                        id,
                        format!("feature length {} != feature_dim {}", row.len(), scene.feature_dim),
                    )
                    .at_point(pi),
                );
            } else if !row.iter().all(|v| v.is_finite()) {
                out.push(
                    Diagnostic::new(Error, "object.feature.finite", id, "non-finite feature value".into()).at_point(pi),
                );
            }
        }
        if obj.embedding.len() != scene.embedding_dim {
            out.push(Diagnostic::new(
                Error,
                "object.embedding.dim",
                id,
                format!(
                    "embedding length {} != embedding_dim {}",
                    obj.embedding.len(),
                    scene.embedding_dim
                ),
            ));
        } else if !obj.embedding.iter().all(|v| v.is_finite()) {
            out.push(Diagnostic::new(Error, "object.embedding.finite", id, "non-finite embedding".into()));
        } else if obj.embedding.iter().all(|&v| v == 0.0) {
            out.push(Diagnostic::new(Warning, "object.embedding.zero", id, "embedding has zero norm".into()));
        }
        if !obj.centroid.iter().all(|c| c.is_finite()) {
            out.push(Diagnostic::new(Error, "object.centroid.finite", id, "non-finite centroid".into()));
        } else if !obj.points.is_empty() && obj.points.iter().all(|p| p.iter().all(|c| c.is_finite())) {
            let mean = ObjectInstance::mean_point(&obj.points);
            let gap = (mean - obj.centroid).norm();
            if gap > CENTROID_TOLERANCE {
                out.push(Diagnostic::new(
                    Error,
                    "object.centroid.mean",
                    id,
                    format!("centroid is {gap:.3e} m from the mean of its points"),
                ));
            }
        }
    }
    out
}

/// Voxel-grid downsampling: one representative per occupied cell of size
/// `spacing`, the stored point nearest the cell center (lowest index on ties).
/// Samples are returned in ascending point order.
pub fn resample_object_surface(obj: &ObjectInstance, spacing: f64) -> Result<Vec<PointSample<'_>>> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing}")));
    }
    if obj.points.is_empty() {
        return Err(Error::invalid(format!("object `{}` has no points", obj.object_id)));
    }
    let mut best: HashMap<[i64; 3], (usize, f64)> = HashMap::new();
    for (i, p) in obj.points.iter().enumerate() {
        let cell = voxel_key(p, spacing);
        let center = Point3::new(
            (cell[0] as f64 + 0.5) * spacing,
            (cell[1] as f64 + 0.5) * spacing,
            (cell[2] as f64 + 0.5) * spacing,
        );
        let d = (p - center).norm_squared();
        best.entry(cell)
            .and_modify(|e| {
                if d < e.1 {
                    *e = (i, d);
                }
            })
            .or_insert((i, d));
    }
    let mut keep: Vec<usize> = best.into_values().map(|(i, _)| i).collect();
    keep.sort_unstable();
    Ok(keep
        .into_iter()
        .map(|i| PointSample {
            position: obj.points[i],
            feature: &obj.point_features[i],
            owner: &obj.object_id,
            index: i,
        })
        .collect())
}

pub(crate) fn voxel_key(p: &Point3<f64>, spacing: f64) -> [i64; 3] {
    [
        (p.x / spacing).floor() as i64,
        (p.y / spacing).floor() as i64,
        (p.z / spacing).floor() as i64,
    ]
}

// JSON document layout

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    scene_id: String,
    feature_dim: usize,
    embedding_dim: usize,
    objects: Vec<ObjectDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    id: String,
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    centroid: Option<[f64; 3]>,
    points: Vec<[f64; 3]>,
    point_features: Vec<Vec<f64>>,
    embedding: Vec<f64>,
}

impl From<SceneDoc> for SceneBundle {
    fn from(doc: SceneDoc) -> Self {
        let objects = doc
            .objects
            .into_iter()
            .map(|o| {
                let points: Vec<Point3<f64>> = o.points.iter().map(|p| Point3::from(*p)).collect();
                let centroid = o
                    .centroid
                    .map(Point3::from)
                    .unwrap_or_else(|| ObjectInstance::mean_point(&points));
                ObjectInstance {
                    object_id: o.id,
                    label: o.label,
                    centroid,
                    points,
                    point_features: o.point_features,
                    embedding: o.embedding,
                }
            })
            .collect();
        SceneBundle {
            scene_id: doc.scene_id,
            feature_dim: doc.feature_dim,
            embedding_dim: doc.embedding_dim,
            objects,
        }
    }
}

impl From<&SceneBundle> for SceneDoc {
    fn from(scene: &SceneBundle) -> Self {
        SceneDoc {
            scene_id: scene.scene_id.clone(),
            feature_dim: scene.feature_dim,
            embedding_dim: scene.embedding_dim,
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    id: o.object_id.clone(),
                    label: o.label.clone(),
                    centroid: Some([o.centroid.x, o.centroid.y, o.centroid.z]),
                    points: o.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
                    point_features: o.point_features.clone(),
                    embedding: o.embedding.clone(),
                })
                .collect(),
        }
    }
}

/// Parses a scene bundle from JSON text and validates it.
pub fn parse_scene_json(text: &str, context: &str) -> Result<SceneBundle> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: SceneDoc = serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
        context: context.to_string(),
        message: format!(
            "field `{}` (line {}, column {}): {}",
            e.path(),
            e.inner().line(),
            e.inner().column(),
            e.inner()
        ),
    })?;
    finish_load(doc.into())
}

fn finish_load(scene: SceneBundle) -> Result<SceneBundle> {
    let errors: Vec<Diagnostic> = validate_scene(&scene).into_iter().filter(Diagnostic::is_error).collect();
    if errors.is_empty() {
        Ok(scene)
    } else {
        Err(Error::Validation(errors))
    }
}

/// Loads and validates a scene bundle (JSON, or the binary variant when the
/// file starts with its magic bytes). Missing centroids are filled in with
/// the mean of the object's points.
pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return finish_load(decode_binary(&bytes, &path.display().to_string())?);
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        context: path.display().to_string(),
        message: format!("not UTF-8: {e}"),
    })?;
    parse_scene_json(text, &path.display().to_string())
}

pub fn scene_to_json(scene: &SceneBundle) -> String {
    serde_json::to_string(&SceneDoc::from(scene)).expect("scene document serializes")
}

pub fn save_scene(scene: &SceneBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &SceneDoc::from(scene)).map_err(|e| Error::Format {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the float32 binary variant. Every array is prefixed with its
/// element count as a little-endian u32.
pub fn save_scene_binary(scene: &SceneBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(BINARY_MAGIC);
    put_u32(&mut buf, BINARY_VERSION);
    put_str(&mut buf, &scene.scene_id);
    put_u32(&mut buf, scene.feature_dim as u32);
    put_u32(&mut buf, scene.embedding_dim as u32);
    put_u32(&mut buf, scene.objects.len() as u32);
    for o in &scene.objects {
        put_str(&mut buf, &o.object_id);
        match &o.label {
            Some(l) => {
                buf.push(1);
                put_str(&mut buf, l);
            }
            None => buf.push(0),
        }
        put_f32s(&mut buf, o.centroid.iter().copied());
        put_f32s(&mut buf, o.points.iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()));
        put_f32s(&mut buf, o.point_features.iter().flatten().copied());
        put_f32s(&mut buf, o.embedding.iter().copied());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    let values: Vec<f32> = values.map(|v| v as f32).collect();
    put_u32(buf, values.len() as u32);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, what: &str) -> Error {
        Error::Format {
            context: self.context.to_string(),
            message: format!("{what} at byte offset {}", self.pos),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(&format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail(&format!("invalid UTF-8 in {what}")))
    }

    fn f32s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u32(what)? as usize;
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.fail(what))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

fn decode_binary(bytes: &[u8], context: &str) -> Result<SceneBundle> {
    let mut r = Reader {
        bytes,
        pos: BINARY_MAGIC.len(),
        context,
    };
    let version = r.u32("version")?;
    if version != BINARY_VERSION {
        return Err(r.fail(&format!("unsupported binary version {version}")));
    }
    let scene_id = r.string("scene_id")?;
    let feature_dim = r.u32("feature_dim")? as usize;
    let embedding_dim = r.u32("embedding_dim")? as usize;
    let n_objects = r.u32("object count")? as usize;
    let mut objects = Vec::with_capacity(n_objects.min(1 << 16));
    for _ in 0..n_objects {
        let object_id = r.string("object id")?;
        let label = match r.take(1, "label flag")?[0] {
            0 => None,
            _ => Some(r.string("label")?),
        };
        // the stored centroid is recomputed from the f32 points below
        if r.f32s("centroid")?.len() != 3 {
            return Err(r.fail("centroid must have 3 values"));
        }
        let flat = r.f32s("points")?;
        if flat.len() % 3 != 0 {
            return Err(r.fail("points length not a multiple of 3"));
        }
        let points: Vec<Point3<f64>> = flat.chunks_exact(3).map(|p| Point3::new(p[0], p[1], p[2])).collect();
        let feats = r.f32s("point_features")?;
        let point_features = if feature_dim == 0 {
            Vec::new()
        } else {
            feats.chunks(feature_dim).map(<[f64]>::to_vec).collect()
        };
        let embedding = r.f32s("embedding")?;
        let centroid = ObjectInstance::mean_point(&points);
        objects.push(ObjectInstance {
            object_id,
            label,
            centroid,
            points,
            point_features,
            embedding,
        });
    }
    Ok(SceneBundle {
        scene_id,
        feature_dim,
        embedding_dim,
        objects,
    })
}
