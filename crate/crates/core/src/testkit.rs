//! Deterministic synthetic scenes with known ground-truth maps.
//!
//! Objects are box surfaces sampled on a lattice. Each object's embedding is
//! a unit vector drawn from a generator seeded by its label, so equal labels
//! give equal embeddings and distinct labels are nearly orthogonal. Per-point
//! features are a random-Fourier map (also seeded by the label) of the
//! point's coordinates in the object's own frame, which makes them
//! pose-invariant and smooth while still varying across the surface.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ObjectInstance, SceneBundle};
use crate::spatial::KdTree;

/// Length scale (m) of the random-Fourier point features.
const FEATURE_LENGTH_SCALE: f64 = 0.12;

const LABELS: &[&str] = &[
    "table", "chair", "sofa", "lamp", "cabinet", "bed", "desk", "shelf", "armchair", "nightstand",
    "wardrobe", "stool", "tv stand", "plant", "ottoman", "dresser", "bench", "bookcase", "side table", "piano",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectTemplate {
    pub label: String,
    /// Box side lengths (m).
    pub extents: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub template: usize,
    /// Rotation vector (axis × angle in radians).
    #[serde(default)]
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Placement {
    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::new(Vector3::from(self.rotation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub templates: Vec<ObjectTemplate>,
    pub layout: Vec<Placement>,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    /// Surface lattice spacing (m).
    pub spacing: f64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let t = |label: &str, extents: [f64; 3]| ObjectTemplate {
            label: label.to_string(),
            extents,
        };
        let p = |template: usize, yaw: f64, translation: [f64; 3]| Placement {
            template,
            rotation: [0.0, 0.0, yaw],
            translation,
        };
        SynthSpec {
            seed: 0,
            templates: vec![
                t("table", [0.8, 0.5, 0.45]),
                t("chair", [0.4, 0.4, 0.6]),
                t("lamp", [0.25, 0.25, 0.7]),
                t("cabinet", [0.5, 0.35, 0.5]),
            ],
            layout: vec![
                p(0, 0.0, [0.0, 0.0, 0.225]),
                p(1, 0.3, [0.0, 0.65, 0.3]),
                p(2, 0.0, [0.9, 0.2, 0.35]),
                p(3, -0.4, [-0.9, -0.3, 0.25]),
            ],
            feature_dim: 16,
            embedding_dim: 32,
            spacing: 0.05,
            noise_sigma: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::invalid("feature and embedding dimensions must be positive"));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::invalid("spacing must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if self.layout.is_empty() {
            return Err(Error::invalid("layout has no objects"));
        }
        for t in &self.templates {
            if !t.extents.iter().all(|&e| e > 0.0 && e.is_finite()) {
                return Err(Error::invalid(format!("template `{}` has non-positive extents", t.label)));
            }
        }
        for (i, p) in self.layout.iter().enumerate() {
            if p.template >= self.templates.len() {
                return Err(Error::invalid(format!("placement {i} references missing template {}", p.template)));
            }
            if !p.rotation.iter().chain(&p.translation).all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("placement {i} has a non-finite pose")));
            }
        }
        Ok(())
    }

    /// A compact random room: `n_objects` distinct labels, each placed on
    /// the floor within about a meter of an already placed object.
    pub fn random_room(seed: u64, n_objects: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7009);
        let mut spec = SynthSpec {
            seed,
            templates: Vec::new(),
            layout: Vec::new(),
            ..Default::default()
        };
        place_group(&mut rng, &mut spec, n_objects, Vector3::zeros());
        spec
    }

    /// Several compact groups whose centers lie `separation` meters apart
    /// along x. Returns the spec and the layout indices of each group.
    pub fn random_groups(seed: u64, sizes: &[usize], separation: f64) -> (Self, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6209_5eed);
        let mut spec = SynthSpec {
            seed,
            templates: Vec::new(),
            layout: Vec::new(),
            ..Default::default()
        };
        let mut groups = Vec::new();
        for (g, &n) in sizes.iter().enumerate() {
            let start = spec.layout.len();
            place_group(&mut rng, &mut spec, n, Vector3::new(g as f64 * separation, 0.0, 0.0));
            groups.push((start..spec.layout.len()).collect());
        }
        (spec, groups)
    }
}

fn place_group(rng: &mut ChaCha8Rng, spec: &mut SynthSpec, n: usize, center: Vector3<f64>) {
    let first = spec.layout.len();
    for _ in 0..n {
        // distinct labels across the whole scene
        let label = loop {
            let l = LABELS[rng.gen_range(0..LABELS.len())];
            if spec.templates.iter().all(|t| t.label != l) {
                break l.to_string();
            }
        };
        let extents = [rng.gen_range(0.25..0.6), rng.gen_range(0.25..0.6), rng.gen_range(0.3..0.8)];
        let radius = |e: &[f64; 3]| 0.5 * (e[0] * e[0] + e[1] * e[1]).sqrt();
        let yaw = rng.gen_range(-PI..PI);
        let mut xy = Vector3::zeros();
        for attempt in 0..200 {
            let anchor = if spec.layout.len() == first {
                center
            } else {
                let k = rng.gen_range(first..spec.layout.len());
                Vector3::from(spec.layout[k].translation)
            };
            let ang = rng.gen_range(-PI..PI);
            let dist = if spec.layout.len() == first { 0.0 } else { rng.gen_range(0.55..0.95) };
            let cand = Vector3::new(anchor.x + dist * ang.cos(), anchor.y + dist * ang.sin(), 0.0);
            let clear = spec.layout[first..].iter().all(|p| {
                let other = &spec.templates[p.template].extents;
                let gap = (Vector3::new(p.translation[0], p.translation[1], 0.0) - cand).norm();
                gap > radius(&extents) + radius(other) + 0.02
            });
            if clear || attempt == 199 {
                xy = cand;
                break;
            }
        }
        spec.templates.push(ObjectTemplate { label, extents });
        spec.layout.push(Placement {
            template: spec.templates.len() - 1,
            rotation: [0.0, 0.0, yaw],
            translation: [xy.x, xy.y, 0.5 * extents[2]],
        });
    }
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, stable across platforms and toolchains
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Unit embedding determined by the label alone.
pub fn label_embedding(label: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(label_hash(label));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Random-Fourier feature map seeded by a label.
struct FourierMap {
    freqs: Vec<Vector3<f64>>,
    phases: Vec<f64>,
    amplitude: f64,
}

impl FourierMap {
    fn new(label: &str, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(label_hash(label) ^ 0xfea7_0e5);
        let normal = Normal::new(0.0, 1.0 / FEATURE_LENGTH_SCALE).expect("valid scale");
        let freqs = (0..dim)
            .map(|_| Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        let phases = (0..dim).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        FourierMap {
            freqs,
            phases,
            amplitude: (2.0 / dim as f64).sqrt(),
        }
    }

    fn eval(&self, local: &Vector3<f64>) -> Vec<f64> {
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| self.amplitude * (w.dot(local) + b).cos())
            .collect()
    }
}

/// Box surface lattice centered at the origin, no duplicated edge points.
pub fn box_surface(extents: [f64; 3], spacing: f64) -> Vec<Vector3<f64>> {
    let counts = extents.map(|e| ((e / spacing).round() as usize).max(1));
    let steps = [0, 1, 2].map(|a| extents[a] / counts[a] as f64);
    let mut out = Vec::new();
    for i in 0..=counts[0] {
        for j in 0..=counts[1] {
            for k in 0..=counts[2] {
                let on_face = i == 0 || i == counts[0] || j == 0 || j == counts[1] || k == 0 || k == counts[2];
                if on_face {
                    out.push(Vector3::new(
                        -0.5 * extents[0] + i as f64 * steps[0],
                        -0.5 * extents[1] + j as f64 * steps[1],
                        -0.5 * extents[2] + k as f64 * steps[2],
                    ));
                }
            }
        }
    }
    out
}

fn object_id(index: usize) -> String {
    format!("obj{index}")
}

fn noise_rng(seed: u64, stream: u64, object: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32) + object as u64);
    rng
}

/// Builds objects, optionally moving each by an extra transform after posing.
fn build_scene(spec: &SynthSpec, scene_id: String, stream: u64, extra: &dyn Fn(usize) -> Transform) -> Result<SceneBundle> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let objects = spec
        .layout
        .iter()
        .enumerate()
        .map(|(i, placement)| {
            let template = &spec.templates[placement.template];
            let rotation = placement.rotation();
            let translation = Vector3::from(placement.translation);
            let fourier = FourierMap::new(&template.label, spec.feature_dim);
            let move_by = extra(i);
            let mut rng = noise_rng(spec.seed, stream, i);
            let local = box_surface(template.extents, spec.spacing);
            let points: Vec<Point3<f64>> = local
                .iter()
                .map(|l| move_by.apply(&Point3::from(rotation * l + translation)))
                .collect();
            let point_features = local
                .iter()
                .map(|l| {
                    let mut f = fourier.eval(l);
                    if spec.noise_sigma > 0.0 {
                        f.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                    }
                    f
                })
                .collect();
            ObjectInstance {
                object_id: object_id(i),
                label: Some(template.label.clone()),
                centroid: ObjectInstance::mean_point(&points),
                points,
                point_features,
                embedding: label_embedding(&template.label, spec.embedding_dim),
            }
        })
        .collect();
    Ok(SceneBundle {
        scene_id,
        feature_dim: spec.feature_dim,
        embedding_dim: spec.embedding_dim,
        objects,
    })
}

pub fn gen_scene(spec: &SynthSpec) -> Result<SceneBundle> {
    build_scene(spec, format!("synth-{}", spec.seed), 0, &|_| Transform::identity())
}

/// Affine transform `x ↦ M x + t` applied to one object group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transform {
    /// Row-major 3×3 linear part.
    #[serde(default = "identity_rows")]
    pub matrix: [f64; 9],
    #[serde(default)]
    pub translation: [f64; 3],
}

fn identity_rows() -> [f64; 9] {
    [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            matrix: identity_rows(),
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Transform {
            matrix: identity_rows(),
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn rigid(rotation: &Rotation3<f64>, t: Vector3<f64>) -> Self {
        Self::affine(rotation.matrix(), t)
    }

    pub fn affine(m: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Transform {
            matrix: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn linear(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.matrix)
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear() * p.coords + Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTransform {
    /// Layout indices moved by this transform.
    pub objects: Vec<usize>,
    pub transform: Transform,
}

/// Ground-truth description written next to a synthetic pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// How arbitrary points are attributed to a group.
    pub rule: String,
    pub groups: Vec<GroundTruthGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGroup {
    pub object_ids: Vec<String>,
    pub transform: Transform,
}

/// Maps any point by the transform of the group owning the nearest target
/// point.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    tree: KdTree,
    point_group: Vec<usize>,
    transforms: Vec<Transform>,
    object_group: Vec<usize>,
}

impl GroundTruthOracle {
    pub fn map(&self, q: &Point3<f64>) -> Point3<f64> {
        let nearest = self.tree.nearest(q).expect("oracle has points");
        self.transforms[self.point_group[nearest.index]].apply(q)
    }

    /// Group index of a target layout object.
    pub fn group_of(&self, object: usize) -> usize {
        self.object_group[object]
    }

    pub fn transform(&self, group: usize) -> &Transform {
        &self.transforms[group]
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub target: SceneBundle,
    pub reference: SceneBundle,
    pub truth: GroundTruth,
    pub oracle: GroundTruthOracle,
}

/// Target = `gen_scene(spec)`; reference = the same objects with each group
/// moved by its transform. Group index sets must partition the layout.
pub fn gen_pair(spec: &SynthSpec, groups: &[GroupTransform]) -> Result<SynthPair> {
    spec.validate()?;
    let n = spec.layout.len();
    let mut object_group = vec![usize::MAX; n];
    for (g, group) in groups.iter().enumerate() {
        for &i in &group.objects {
            if i >= n {
                return Err(Error::invalid(format!("group {g} references object {i} outside the layout")));
            }
            if object_group[i] != usize::MAX {
                return Err(Error::invalid(format!("object {i} appears in groups {} and {g}", object_group[i])));
            }
            object_group[i] = g;
        }
        if !group.transform.matrix.iter().chain(&group.transform.translation).all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("group {g} has a non-finite transform")));
        }
    }
    if let Some(i) = object_group.iter().position(|&g| g == usize::MAX) {
        return Err(Error::invalid(format!("object {i} belongs to no group")));
    }

    let target = build_scene(spec, format!("synth-{}-target", spec.seed), 0, &|_| Transform::identity())?;
    let transforms: Vec<Transform> = groups.iter().map(|g| g.transform).collect();
    let reference = build_scene(spec, format!("synth-{}-reference", spec.seed), 1, &|i| transforms[object_group[i]])?;

    let points = target.all_points();
    let point_group = target
        .objects
        .iter()
        .enumerate()
        .flat_map(|(i, o)| std::iter::repeat(object_group[i]).take(o.points.len()))
        .collect();
    let truth = GroundTruth {
        rule: "nearest-target-point".into(),
        groups: groups
            .iter()
            .map(|g| GroundTruthGroup {
                object_ids: g.objects.iter().map(|&i| object_id(i)).collect(),
                transform: g.transform,
            })
            .collect(),
    };
    let oracle = GroundTruthOracle {
        tree: KdTree::new(&points),
        point_group,
        transforms,
        object_group,
    };
    Ok(SynthPair {
        target,
        reference,
        truth,
        oracle,
    })
}

/// One group containing every object.
pub fn whole_scene_group(spec: &SynthSpec, transform: Transform) -> Vec<GroupTransform> {
    vec![GroupTransform {
        objects: (0..spec.layout.len()).collect(),
        transform,
    }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::validate_scene;

    #[test]
    fn default_scene_is_valid_and_deterministic() {
        let spec = SynthSpec::default();
        let a = gen_scene(&spec).unwrap();
        assert!(validate_scene(&a).is_empty());
        assert_eq!(a, gen_scene(&spec).unwrap());
        assert_eq!(a.feature_dim, 16);
        assert_eq!(a.embedding_dim, 32);
    }

    #[test]
    fn same_label_same_embedding() {
        let mut spec = SynthSpec::default();
        spec.layout.push(Placement {
            template: 1,
            rotation: [0.0, 0.0, 1.0],
            translation: [2.0, 2.0, 0.3],
        });
        let s = gen_scene(&spec).unwrap();
        assert_eq!(s.objects[1].embedding, s.objects[4].embedding);
        // same template at another pose: same local points, same features
        assert_eq!(s.objects[1].point_features, s.objects[4].point_features);
        let (a, b) = (&s.objects[1].points, &s.objects[4].points);
        assert_eq!(a.len(), b.len());
    }

    #[test]
    fn embeddings_are_nearly_orthogonal() {
        for dim in [32, 64] {
            let embs: Vec<Vec<f64>> = LABELS.iter().map(|l| label_embedding(l, dim)).collect();
            let mut total = 0.0;
            let mut count = 0.0;
            for i in 0..embs.len() {
                for j in (i + 1)..embs.len() {
                    let c: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| a * b).sum();
                    total += c.abs();
                    count += 1.0;
                }
            }
            assert!(total / count <= 0.2, "mean |cos| = {}", total / count);
        }
    }

    #[test]
    fn box_surface_has_no_duplicates() {
        let pts = box_surface([0.4, 0.3, 0.2], 0.1);
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                assert!((a - b).norm() > 1e-9);
            }
        }
        // 5×4×3 lattice minus the 3×2×1 interior
        assert_eq!(pts.len(), 5 * 4 * 3 - 3 * 2);
    }

    #[test]
    fn identity_pair_is_identical() {
        let spec = SynthSpec::default();
        let pair = gen_pair(&spec, &whole_scene_group(&spec, Transform::identity())).unwrap();
        for (a, b) in pair.target.objects.iter().zip(&pair.reference.objects) {
            assert_eq!(a.points, b.points);
            assert_eq!(a.point_features, b.point_features);
        }
        let q = Point3::new(0.3, -0.2, 0.5);
        assert_eq!(pair.oracle.map(&q), q);
    }

    #[test]
    fn translated_pair_moves_centroids() {
        let spec = SynthSpec::default();
        let t = Vector3::new(2.0, 0.0, 0.0);
        let pair = gen_pair(&spec, &whole_scene_group(&spec, Transform::translation(t))).unwrap();
        for (a, b) in pair.target.objects.iter().zip(&pair.reference.objects) {
            assert!((b.centroid - (a.centroid + t)).norm() < 1e-12);
        }
    }

    #[test]
    fn two_groups_map_piecewise() {
        let (spec, groups) = SynthSpec::random_groups(4, &[2, 2], 4.0);
        let moves = [Vector3::zeros(), Vector3::new(0.0, 2.5, 0.0)];
        let gts: Vec<GroupTransform> = groups
            .iter()
            .zip(moves)
            .map(|(g, t)| GroupTransform {
                objects: g.clone(),
                transform: Transform::translation(t),
            })
            .collect();
        let pair = gen_pair(&spec, &gts).unwrap();
        for (i, obj) in pair.target.objects.iter().enumerate() {
            let expected = moves[pair.oracle.group_of(i)];
            for p in &obj.points {
                assert!((pair.oracle.map(p) - (p + expected)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn group_sets_must_partition() {
        let spec = SynthSpec::default();
        let overlapping = vec![
            GroupTransform { objects: vec![0, 1], transform: Transform::identity() },
            GroupTransform { objects: vec![1, 2, 3], transform: Transform::identity() },
        ];
        assert!(gen_pair(&spec, &overlapping).is_err());
        let missing = vec![GroupTransform { objects: vec![0, 1], transform: Transform::identity() }];
        assert!(gen_pair(&spec, &missing).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let spec = SynthSpec {
            noise_sigma: 0.05,
            ..Default::default()
        };
        assert_eq!(gen_scene(&spec).unwrap(), gen_scene(&spec).unwrap());
        let clean = gen_scene(&SynthSpec::default()).unwrap();
        assert_ne!(gen_scene(&spec).unwrap().objects[0].point_features, clean.objects[0].point_features);
    }

    #[test]
    fn random_rooms_are_connected_and_valid() {
        for seed in 0..10 {
            let spec = SynthSpec::random_room(seed, 5);
            let s = gen_scene(&spec).unwrap();
            assert!(validate_scene(&s).is_empty());
            let g = crate::graph::build_graph(&s, 1.5).unwrap();
            assert!(!g.edges.is_empty());
        }
    }
}
