//! Coarse alignment: cluster object matches by their centroid translation,
//! fit one affine map per cluster and hand every target object a map.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dbscan::{dbscan, NOISE};
use crate::graph::SceneGraph;
use crate::matching::{MatchPair, MatchSet};
use crate::scene::SceneBundle;

/// Singular-value floor below which centroid sets count as degenerate.
pub const DEGENERACY_TOLERANCE: f64 = 1e-6;
/// Minimum `|det A|` for an accepted fit.
pub const MIN_DETERMINANT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitKind {
    Affine,
    Similarity,
    Translation,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "AffineDoc", try_from = "AffineDoc")]
pub struct AffineMap {
    pub matrix: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub kind: FitKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineDoc {
    /// Row-major 3×3.
    matrix: [f64; 9],
    translation: [f64; 3],
    kind: FitKind,
}

impl From<AffineMap> for AffineDoc {
    fn from(m: AffineMap) -> Self {
        let a = &m.matrix;
        AffineDoc {
            matrix: [
                a[(0, 0)], a[(0, 1)], a[(0, 2)],
                a[(1, 0)], a[(1, 1)], a[(1, 2)],
                a[(2, 0)], a[(2, 1)], a[(2, 2)],
            ],
            translation: [m.translation.x, m.translation.y, m.translation.z],
            kind: m.kind,
        }
    }
}

impl TryFrom<AffineDoc> for AffineMap {
    type Error = String;

    fn try_from(d: AffineDoc) -> Result<Self, String> {
        if !d.matrix.iter().chain(&d.translation).all(|v| v.is_finite()) {
            return Err("affine map has non-finite entries".into());
        }
        Ok(AffineMap {
            matrix: Matrix3::from_row_slice(&d.matrix),
            translation: Vector3::from(d.translation),
            kind: d.kind,
        })
    }
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap {
            matrix: Matrix3::identity(),
            translation: Vector3::zeros(),
            kind: FitKind::Identity,
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        AffineMap {
            matrix: Matrix3::identity(),
            translation: t,
            kind: FitKind::Translation,
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.matrix * p.coords + self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCluster {
    /// DBSCAN label; noise matches are promoted to singleton clusters that
    /// keep the label `-1`.
    pub cluster_id: i64,
    pub members: Vec<MatchPair>,
}

fn centroid_pair(pair: &MatchPair, g_tgt: &SceneGraph, g_ref: &SceneGraph) -> (Point3<f64>, Point3<f64>) {
    let t = g_tgt
        .node_index(&pair.target_id)
        .unwrap_or_else(|| panic!("match target `{}` not in target graph", pair.target_id));
    let r = g_ref
        .node_index(&pair.reference_id)
        .unwrap_or_else(|| panic!("match reference `{}` not in reference graph", pair.reference_id));
    (g_tgt.nodes[t].centroid, g_ref.nodes[r].centroid)
}

/// Runs DBSCAN on the translation vectors `centroid_ref − centroid_tgt` of
/// the matches. Real clusters come first in label order, followed by one
/// singleton per noise match in match order.
pub fn cluster_matches(matches: &MatchSet, g_tgt: &SceneGraph, g_ref: &SceneGraph, eps: f64, min_pts: usize) -> Vec<MatchCluster> {
    if matches.is_empty() {
        return Vec::new();
    }
    let translations: Vec<[f64; 3]> = matches
        .pairs
        .iter()
        .map(|m| {
            let (t, r) = centroid_pair(m, g_tgt, g_ref);
            let d = r - t;
            [d.x, d.y, d.z]
        })
        .collect();
    let labels = dbscan(&translations, eps, min_pts);

    let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as usize;
    let mut clusters: Vec<MatchCluster> = (0..n_clusters)
        .map(|id| MatchCluster {
            cluster_id: id as i64,
            members: Vec::new(),
        })
        .collect();
    let mut noise = Vec::new();
    for (pair, &label) in matches.pairs.iter().zip(&labels) {
        if label == NOISE {
            noise.push(MatchCluster {
                cluster_id: NOISE,
                members: vec![pair.clone()],
            });
        } else {
            clusters[label as usize].members.push(pair.clone());
        }
    }
    clusters.extend(noise);
    clusters
}

/// Least-squares fit from member target centroids to reference centroids.
pub fn fit_affine(cluster: &MatchCluster, g_tgt: &SceneGraph, g_ref: &SceneGraph) -> AffineMap {
    let (src, dst): (Vec<_>, Vec<_>) = cluster.members.iter().map(|m| centroid_pair(m, g_tgt, g_ref)).unzip();
    fit_affine_points(&src, &dst)
}

/// Fallback ladder: full affine for ≥ 4 well-spread correspondences,
/// similarity for 3 (or degenerate spreads), translation otherwise.
pub fn fit_affine_points(src: &[Point3<f64>], dst: &[Point3<f64>]) -> AffineMap {
    assert_eq!(src.len(), dst.len(), "correspondence lists differ in length");
    let n = src.len();
    if n == 0 {
        return AffineMap::identity();
    }
    if n >= 4 && min_spread(src) > DEGENERACY_TOLERANCE {
        if let Some(m) = least_squares_affine(src, dst) {
            return m;
        }
    }
    if n >= 3 {
        if let Some(m) = umeyama(src, dst) {
            return m;
        }
    }
    let mean_src = Point3::from(src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n as f64);
    let mean_dst = Point3::from(dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n as f64);
    AffineMap::translation(mean_dst - mean_src)
}

/// Smallest singular value of the centered 3×N coordinate matrix.
pub(crate) fn min_spread(points: &[Point3<f64>]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mean = points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n as f64;
    let centered = DMatrix::from_fn(3, n, |r, c| points[c][r] - mean[r]);
    centered
        .singular_values()
        .iter().copied().fold(f64::INFINITY, f64::min)
}

fn least_squares_affine(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Option<AffineMap> {
    let n = src.len();
    let design = DMatrix::from_fn(n, 4, |r, c| if c < 3 { src[r][c] } else { 1.0 });
    let rhs = DMatrix::from_fn(n, 3, |r, c| dst[r][c]);
    let sol = design.svd(true, true).solve(&rhs, 1e-14).ok()?;
    // sol is 4×3: rows 0..3 hold Aᵀ, row 3 holds b
    let matrix = Matrix3::from_fn(|r, c| sol[(c, r)]);
    let translation = Vector3::new(sol[(3, 0)], sol[(3, 1)], sol[(3, 2)]);
    let ok = matrix.iter().chain(translation.iter()).all(|v| v.is_finite()) && matrix.determinant().abs() > MIN_DETERMINANT;
    ok.then_some(AffineMap {
        matrix,
        translation,
        kind: FitKind::Affine,
    })
}

/// Rotation + uniform scale + translation (Umeyama's closed form).
fn umeyama(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Option<AffineMap> {
    let n = src.len() as f64;
    let mu_s = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let var_s = src.iter().map(|p| (p.coords - mu_s).norm_squared()).sum::<f64>() / n;
    if var_s <= DEGENERACY_TOLERANCE * DEGENERACY_TOLERANCE {
        return None;
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d.coords - mu_d) * (s.coords - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_s;
    let matrix = rotation * scale;
    if !(matrix.determinant().abs() > MIN_DETERMINANT) {
        return None;
    }
    Some(AffineMap {
        matrix,
        translation: mu_d - matrix * mu_s,
        kind: FitKind::Similarity,
    })
}

/// Map per target object: its cluster's map when matched, otherwise the map
/// of the cluster with the nearest member target centroid; identity for all
/// when there are no clusters.
pub fn assign_object_maps(
    scene_tgt: &SceneBundle,
    clusters: &[MatchCluster],
    fits: &[AffineMap],
    g_tgt: &SceneGraph,
) -> BTreeMap<String, AffineMap> {
    assert_eq!(clusters.len(), fits.len(), "one fit per cluster");
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    let mut member_centroids: Vec<Vec<Point3<f64>>> = Vec::with_capacity(clusters.len());
    for (ci, c) in clusters.iter().enumerate() {
        let mut cs = Vec::new();
        for m in &c.members {
            owner.insert(&m.target_id, ci);
            if let Some(t) = g_tgt.node_index(&m.target_id) {
                cs.push(g_tgt.nodes[t].centroid);
            }
        }
        member_centroids.push(cs);
    }

    scene_tgt
        .objects
        .iter()
        .map(|obj| {
            let (id, centroid) = (&obj.object_id, &obj.centroid);
            let map = if let Some(&ci) = owner.get(id.as_str()) {
                fits[ci]
            } else {
                let nearest = member_centroids
                    .iter()
                    .enumerate()
                    .filter_map(|(ci, cs)| {
                        cs.iter()
                            .map(|c| (c - centroid).norm())
                            .min_by(f64::total_cmp)
                            .map(|d| (ci, d))
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                nearest.map_or_else(AffineMap::identity, |(ci, _)| fits[ci])
            };
            (id.clone(), map)
        })
        .collect()
}
