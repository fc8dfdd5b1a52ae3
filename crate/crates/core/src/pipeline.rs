//! End-to-end map estimation and the map artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::coarse::{assign_object_maps, cluster_matches, fit_affine, AffineMap, FitKind};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::fine::{optimize_displacements, DisplacementSolution};
use crate::graph::build_graph;
use crate::matching::{match_graphs, MatchPair, MatchSet};
use crate::scene::{validate_scene, SceneBundle};
use crate::tps::{fit_tps, ThinPlateSpline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterRecord {
    pub cluster_id: i64,
    pub members: Vec<MatchPair>,
    pub affine: AffineMap,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplacementStats {
    pub points: usize,
    pub mean_norm: f64,
    pub max_norm: f64,
    /// Summed residual before and after refinement.
    pub cost_before: f64,
    pub cost_after: f64,
}

impl DisplacementStats {
    fn from_solution(sol: &DisplacementSolution) -> Self {
        let n = sol.entries.len();
        let mean_norm = if n == 0 {
            0.0
        } else {
            sol.entries.iter().map(|e| e.delta.norm()).sum::<f64>() / n as f64
        };
        DisplacementStats {
            points: n,
            mean_norm,
            max_norm: sol.max_displacement(),
            cost_before: sol.total_cost_before(),
            cost_after: sol.total_cost_after(),
        }
    }
}

/// Why the final spline is not a fitted thin-plate spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fallback {
    /// No object matches at all: the map is the identity.
    Identity,
    /// The spline fit was degenerate: the map is the affine of the largest
    /// cluster.
    DominantClusterAffine { cluster: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub target_scene: String,
    pub reference_scene: String,
    pub matches: MatchSet,
    pub clusters: Vec<ClusterRecord>,
    pub object_kinds: BTreeMap<String, FitKind>,
    pub displacements: DisplacementStats,
    pub fallback: Option<Fallback>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMap {
    pub spline: ThinPlateSpline,
    pub provenance: Provenance,
    pub config: PipelineConfig,
}

impl SceneMap {
    pub fn apply(&self, q: &Point3<f64>) -> Result<Point3<f64>> {
        self.spline.apply(q)
    }

    /// True when the map fell back because the spline fit was degenerate.
    pub fn is_degenerate_fallback(&self) -> bool {
        matches!(self.provenance.fallback, Some(Fallback::DominantClusterAffine { .. }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene map serializes")
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let map: SceneMap = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Format {
            context: context.to_string(),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })?;
        if map.spline.control_points.len() != map.spline.kernel_weights.len() {
            return Err(Error::Format {
                context: context.to_string(),
                message: "spline has different numbers of control points and kernel weights".into(),
            });
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Human-readable stage summary.
    pub fn summary(&self) -> String {
        let p = &self.provenance;
        let mut s = String::new();
        let _ = writeln!(s, "matches            {}", p.matches.len());
        let _ = writeln!(s, "clusters           {}", p.clusters.len());
        let _ = writeln!(s, "refined points     {}", p.displacements.points);
        let _ = writeln!(s, "mean |delta| (m)   {:.6}", p.displacements.mean_norm);
        let _ = writeln!(s, "C_fine before      {:.6}", p.displacements.cost_before);
        let _ = writeln!(s, "C_fine after       {:.6}", p.displacements.cost_after);
        let _ = writeln!(s, "control points     {}", self.spline.control_points.len());
        match &p.fallback {
            None => {}
            Some(Fallback::Identity) => {
                let _ = writeln!(s, "fallback           identity map");
            }
            Some(Fallback::DominantClusterAffine { cluster, .. }) => {
                let _ = writeln!(s, "fallback           affine of cluster {cluster}");
            }
        }
        for d in &p.diagnostics {
            let _ = writeln!(s, "warning: {d}");
        }
        s
    }
}

fn check_inputs(scene_tgt: &SceneBundle, scene_ref: &SceneBundle) -> Result<()> {
    let errors: Vec<_> = validate_scene(scene_tgt)
        .into_iter()
        .chain(validate_scene(scene_ref))
        .filter(|d| d.is_error())
        .collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    if scene_tgt.feature_dim != scene_ref.feature_dim {
        return Err(Error::invalid(format!(
            "scenes have different feature dimensions ({} vs {})",
            scene_tgt.feature_dim, scene_ref.feature_dim
        )));
    }
    if scene_tgt.embedding_dim != scene_ref.embedding_dim {
        return Err(Error::invalid(format!(
            "scenes have different embedding dimensions ({} vs {})",
            scene_tgt.embedding_dim, scene_ref.embedding_dim
        )));
    }
    Ok(())
}

/// Estimates the map from `scene_tgt` into `scene_ref`.
pub fn build_scene_map(scene_tgt: &SceneBundle, scene_ref: &SceneBundle, cfg: &PipelineConfig) -> Result<SceneMap> {
    build_scene_map_detailed(scene_tgt, scene_ref, cfg).map(|(map, _)| map)
}

/// Like [`build_scene_map`], also returning the per-point displacements
/// (empty when there were no matches).
pub fn build_scene_map_detailed(
    scene_tgt: &SceneBundle,
    scene_ref: &SceneBundle,
    cfg: &PipelineConfig,
) -> Result<(SceneMap, DisplacementSolution)> {
    cfg.validate()?;
    check_inputs(scene_tgt, scene_ref)?;
    let g_tgt = build_graph(scene_tgt, cfg.edge_threshold)?;
    let g_ref = build_graph(scene_ref, cfg.edge_threshold)?;
    let matches = match_graphs(&g_tgt, &g_ref, &cfg.affinity)?;

    let mut provenance = Provenance {
        target_scene: scene_tgt.scene_id.clone(),
        reference_scene: scene_ref.scene_id.clone(),
        matches: matches.clone(),
        clusters: Vec::new(),
        object_kinds: BTreeMap::new(),
        displacements: DisplacementStats::default(),
        fallback: None,
        diagnostics: Vec::new(),
    };

    if matches.is_empty() {
        provenance.object_kinds = scene_tgt
            .objects
            .iter()
            .map(|o| (o.object_id.clone(), FitKind::Identity))
            .collect();
        provenance.fallback = Some(Fallback::Identity);
        provenance.diagnostics.push("no object matches between the scenes; the map is the identity".into());
        let map = SceneMap {
            spline: ThinPlateSpline::identity(),
            provenance,
            config: cfg.clone(),
        };
        return Ok((map, DisplacementSolution::default()));
    }

    let clusters = cluster_matches(&matches, &g_tgt, &g_ref, cfg.clustering.eps, cfg.clustering.min_pts);
    let fits: Vec<AffineMap> = clusters.iter().map(|c| fit_affine(c, &g_tgt, &g_ref)).collect();
    let object_maps = assign_object_maps(scene_tgt, &clusters, &fits, &g_tgt);
    for obj in &scene_tgt.objects {
        if matches.reference_for(&obj.object_id).is_none() {
            provenance
                .diagnostics
                .push(format!("object `{}` is unmatched; it uses the map of the nearest cluster", obj.object_id));
        }
    }
    provenance.object_kinds = object_maps.iter().map(|(id, m)| (id.clone(), m.kind)).collect();
    provenance.clusters = clusters
        .iter()
        .zip(&fits)
        .map(|(c, f)| ClusterRecord {
            cluster_id: c.cluster_id,
            members: c.members.clone(),
            affine: *f,
        })
        .collect();

    let field_tgt = FeatureField::build(scene_tgt, &cfg.field)?;
    let field_ref = FeatureField::build(scene_ref, &cfg.field)?;
    let solution = optimize_displacements(scene_tgt, &object_maps, &field_tgt, &field_ref, &cfg.optim)?;
    provenance.displacements = DisplacementStats::from_solution(&solution);

    let pairs: Vec<_> = solution.entries.iter().map(|e| (e.source, e.target())).collect();
    let spline = match fit_tps(&pairs, &cfg.tps) {
        Ok(spline) => spline,
        Err(Error::Degenerate(reason)) => {
            // largest cluster, lowest index on ties
            let dominant = (0..clusters.len())
                .max_by(|&a, &b| clusters[a].members.len().cmp(&clusters[b].members.len()).then(b.cmp(&a)))
                .expect("matches imply at least one cluster");
            provenance.diagnostics.push(format!("{reason}; using the affine map of cluster {dominant}"));
            provenance.fallback = Some(Fallback::DominantClusterAffine {
                cluster: dominant,
                reason,
            });
            ThinPlateSpline::from_affine(&fits[dominant])
        }
        Err(e) => return Err(e),
    };

    let map = SceneMap {
        spline,
        provenance,
        config: cfg.clone(),
    };
    Ok((map, solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::tiny_object;
    use crate::testkit::{gen_pair, gen_scene, whole_scene_group, SynthSpec, Transform};
    use nalgebra::Vector3;

    fn fast_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.optim.sample_spacing = 0.15;
        cfg
    }

    fn small_spec() -> SynthSpec {
        let mut spec = SynthSpec::default();
        spec.layout.truncate(3);
        spec
    }

    #[test]
    fn identity_pair_gives_identity_map() {
        let scene = gen_scene(&small_spec()).unwrap();
        let map = build_scene_map(&scene, &scene, &fast_cfg()).unwrap();
        assert_eq!(map.provenance.matches.len(), 3);
        assert_eq!(map.provenance.displacements.cost_after, 0.0);
        for p in scene.all_points().iter().step_by(7) {
            assert!((map.apply(p).unwrap() - p).norm() <= 1e-6);
        }
    }

    #[test]
    fn translated_pair_recovers_translation() {
        let spec = small_spec();
        let t = Vector3::new(1.5, -0.5, 0.0);
        let pair = gen_pair(&spec, &whole_scene_group(&spec, Transform::translation(t))).unwrap();
        let map = build_scene_map(&pair.target, &pair.reference, &fast_cfg()).unwrap();
        assert_eq!(map.provenance.clusters.len(), 1);
        for p in pair.target.all_points().iter().step_by(5) {
            assert!((map.apply(p).unwrap() - (p + t)).norm() <= 1e-6);
        }
    }

    #[test]
    fn no_matches_gives_identity_with_diagnostic() {
        let mut a = SceneBundle {
            scene_id: "a".into(),
            feature_dim: 2,
            embedding_dim: 2,
            objects: vec![tiny_object("x", &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 2)],
        };
        a.objects[0].embedding = vec![1.0, 0.0];
        let mut b = a.clone();
        b.scene_id = "b".into();
        b.objects[0].embedding = vec![0.0, 1.0];
        let map = build_scene_map(&a, &b, &PipelineConfig::default()).unwrap();
        assert_eq!(map.provenance.fallback, Some(Fallback::Identity));
        assert!(!map.provenance.diagnostics.is_empty());
        assert_eq!(map.apply(&Point3::new(0.3, 0.2, 0.1)).unwrap(), Point3::new(0.3, 0.2, 0.1));
    }

    #[test]
    fn coplanar_samples_fall_back_to_dominant_affine() {
        // two flat objects in the z = 0 plane
        let pts: Vec<[f64; 3]> = (0..25).map(|i| [(i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1, 0.0]).collect();
        let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
        let mut a = tiny_object("a", &pts, 3);
        let mut b = tiny_object("b", &shifted, 3);
        a.embedding = vec![1.0, 0.0];
        b.embedding = vec![0.0, 1.0];
        let scene = SceneBundle {
            scene_id: "flat".into(),
            feature_dim: 3,
            embedding_dim: 2,
            objects: vec![a, b],
        };
        let map = build_scene_map(&scene, &scene, &fast_cfg()).unwrap();
        assert!(map.is_degenerate_fallback());
        assert_eq!(map.spline.control_points.len(), 0);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let scene = gen_scene(&small_spec()).unwrap();
        let mut other = scene.clone();
        other.embedding_dim = 3;
        other.objects.iter_mut().for_each(|o| o.embedding.truncate(3));
        assert!(build_scene_map(&scene, &other, &fast_cfg()).is_err());
    }

    #[test]
    fn artifact_round_trips() {
        let scene = gen_scene(&small_spec()).unwrap();
        let map = build_scene_map(&scene, &scene, &fast_cfg()).unwrap();
        let back = SceneMap::from_json(&map.to_json(), "map").unwrap();
        assert_eq!(back, map);
        assert!(map.summary().contains("matches            3"));
    }
}
