//! Object-level association between two scene graphs.
//!
//! Matching is posed as a quadratic assignment over candidate node pairs and
//! relaxed spectrally: the affinity matrix `M` has node affinities on the
//! diagonal and edge-pair affinities off the diagonal, its principal
//! eigenvector scores each candidate, and a greedy pass discretizes the
//! scores into a one-to-one (possibly partial) assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphEdge, SceneGraph};

const POWER_ITERATIONS: usize = 200;
const POWER_TOLERANCE: f64 = 1e-9;
/// Greedy discretization stops below this fraction of the first accepted score.
const STOP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityConfig {
    pub node_weight: f64,
    pub edge_feature_weight: f64,
    /// Gaussian scale (m) for edge-length compatibility.
    pub length_sigma: f64,
    /// Node pairs with embedding cosine below this are never candidates.
    pub min_node_affinity: f64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            node_weight: 1.0,
            edge_feature_weight: 1.0,
            length_sigma: 0.5,
            min_node_affinity: 0.2,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.node_weight) || !unit(self.edge_feature_weight) {
            return Err(Error::invalid("affinity weights must lie in [0, 1]"));
        }
        if !(self.length_sigma > 0.0) {
            return Err(Error::invalid("length_sigma must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.min_node_affinity) {
            return Err(Error::invalid("min_node_affinity must lie in [-1, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub target_id: String,
    pub reference_id: String,
    pub score: f64,
}

/// Injective target → reference associations, in non-increasing score order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn reference_for(&self, target_id: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.target_id == target_id)
            .map(|p| p.reference_id.as_str())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of two embeddings.
pub fn node_affinity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    cosine(a, b).ok_or_else(|| Error::invalid("node affinity of a zero vector"))
}

/// Compatibility of a target edge with a reference edge, in
/// `[0, edge_feature_weight]`.
pub fn pairwise_affinity(e_tgt: &GraphEdge, e_ref: &GraphEdge, cfg: &AffinityConfig) -> f64 {
    let feat = cosine(&e_tgt.feature, &e_ref.feature).unwrap_or(0.0).max(0.0);
    let gap = e_tgt.length - e_ref.length;
    let length = (-(gap * gap) / (2.0 * cfg.length_sigma * cfg.length_sigma)).exp();
    cfg.edge_feature_weight * feat * length
}

struct Candidate {
    tgt: usize,
    reference: usize,
    diag: f64,
}

/// Spectral graph matching with greedy discretization.
///
/// Candidates are node pairs whose embedding cosine reaches
/// `min_node_affinity`. The score of candidate `a` is `(M x)_a`, that is
/// `λ x_a` for the principal eigenpair `(λ, x)`, computed independently on
/// every connected block of `M` so that objects without edges are still
/// scored by their node affinity.
pub fn match_graphs(g_tgt: &SceneGraph, g_ref: &SceneGraph, cfg: &AffinityConfig) -> Result<MatchSet> {
    cfg.validate()?;
    let n_ref = g_ref.node_count();

    let mut candidates = Vec::new();
    let mut lookup = vec![None; g_tgt.node_count() * n_ref];
    for (i, nt) in g_tgt.nodes.iter().enumerate() {
        for (a, nr) in g_ref.nodes.iter().enumerate() {
            // zero-norm embeddings never form candidates
            let Some(aff) = cosine(&nt.feature, &nr.feature) else {
                continue;
            };
            if aff >= cfg.min_node_affinity {
                lookup[i * n_ref + a] = Some(candidates.len());
                candidates.push(Candidate {
                    tgt: i,
                    reference: a,
                    diag: cfg.node_weight * aff.max(0.0),
                });
            }
        }
    }
    if candidates.is_empty() {
        return Ok(MatchSet::default());
    }

    // sparse off-diagonal rows, ascending column order
    let rows: Vec<Vec<(usize, f64)>> = candidates
        .iter()
        .map(|c| {
            let mut row = Vec::new();
            for j in g_tgt.neighbors(c.tgt) {
                let e_t = g_tgt.edge_between(c.tgt, j).expect("neighbor has an edge");
                for b in g_ref.neighbors(c.reference) {
                    if let Some(col) = lookup[j * n_ref + b] {
                        let e_r = g_ref.edge_between(c.reference, b).expect("neighbor has an edge");
                        let w = pairwise_affinity(e_t, e_r, cfg);
                        if w > 0.0 {
                            row.push((col, w));
                        }
                    }
                }
            }
            row.sort_by_key(|&(col, _)| col);
            row
        })
        .collect();

    let scores = block_scores(&candidates, &rows);

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y].total_cmp(&scores[x]).then_with(|| {
            let (cx, cy) = (&candidates[x], &candidates[y]);
            g_tgt.nodes[cx.tgt]
                .object_id
                .cmp(&g_tgt.nodes[cy.tgt].object_id)
                .then(g_ref.nodes[cx.reference].object_id.cmp(&g_ref.nodes[cy.reference].object_id))
        })
    });

    let mut used_t = vec![false; g_tgt.node_count()];
    let mut used_r = vec![false; n_ref];
    let mut pairs = Vec::new();
    let mut first: Option<f64> = None;
    for idx in order {
        let s = scores[idx];
        match first {
            None if s <= 0.0 => break,
            Some(f) if s < STOP_FRACTION * f => break,
            _ => {}
        }
        let c = &candidates[idx];
        if used_t[c.tgt] || used_r[c.reference] {
            continue;
        }
        first.get_or_insert(s);
        used_t[c.tgt] = true;
        used_r[c.reference] = true;
        pairs.push(MatchPair {
            target_id: g_tgt.nodes[c.tgt].object_id.clone(),
            reference_id: g_ref.nodes[c.reference].object_id.clone(),
            score: s,
        });
    }
    Ok(MatchSet { pairs })
}

fn block_scores(candidates: &[Candidate], rows: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let n = candidates.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (a, row) in rows.iter().enumerate() {
        for &(b, _) in row {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); n];
    for a in 0..n {
        let r = find(&mut parent, a);
        blocks[r].push(a);
    }

    let mut x = vec![0.0; n];
    let mut local = vec![0usize; n];
    for block in blocks.iter().filter(|b| !b.is_empty()) {
        for (k, &a) in block.iter().enumerate() {
            local[a] = k;
        }
        let v = principal_vector(block, &local, candidates, rows);
        for (k, &a) in block.iter().enumerate() {
            x[a] = v[k];
        }
    }

    (0..n)
        .map(|a| {
            candidates[a].diag * x[a] + rows[a].iter().map(|&(b, w)| w * x[b]).sum::<f64>()
        })
        .collect()
}

/// Power iteration on `M + I` restricted to one block. The shift keeps the
/// iteration aperiodic without changing eigenvectors.
fn principal_vector(block: &[usize], local: &[usize], candidates: &[Candidate], rows: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let m = block.len();
    let mut v = vec![1.0 / (m as f64).sqrt(); m];
    let mut next = vec![0.0; m];
    for _ in 0..POWER_ITERATIONS {
        for (k, &a) in block.iter().enumerate() {
            let mut acc = (1.0 + candidates[a].diag) * v[k];
            for &(b, w) in &rows[a] {
                acc += w * v[local[b]];
            }
            next[k] = acc;
        }
        let norm = next.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let mut change = 0.0;
        for k in 0..m {
            let t = next[k] / norm;
            change += (t - v[k]) * (t - v[k]);
            v[k] = t;
        }
        if change.sqrt() < POWER_TOLERANCE {
            break;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::scene::{ObjectInstance, SceneBundle};
    use nalgebra::Point3;

    fn scene(ids: &[&str], centroids: &[[f64; 3]], feats: &[Vec<f64>]) -> SceneBundle {
        SceneBundle {
            scene_id: "m".into(),
            feature_dim: 1,
            embedding_dim: feats[0].len(),
            objects: ids
                .iter()
                .zip(centroids)
                .zip(feats)
                .map(|((id, c), f)| ObjectInstance {
                    object_id: id.to_string(),
                    label: None,
                    centroid: Point3::from(*c),
                    points: vec![Point3::from(*c)],
                    point_features: vec![vec![0.0]],
                    embedding: f.clone(),
                })
                .collect(),
        }
    }

    fn edge(length: f64, feature: Vec<f64>) -> GraphEdge {
        GraphEdge {
            endpoints: (0, 1),
            length,
            feature,
        }
    }

    #[test]
    fn node_affinity_examples() {
        assert!((node_affinity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(node_affinity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((node_affinity(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-6);
        assert!(node_affinity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn pairwise_affinity_examples() {
        let cfg = AffinityConfig {
            edge_feature_weight: 0.8,
            ..Default::default()
        };
        let e = edge(1.0, vec![1.0, 2.0]);
        assert!((pairwise_affinity(&e, &e, &cfg) - 0.8).abs() < 1e-12);
        let longer = edge(1.0 + cfg.length_sigma, vec![1.0, 2.0]);
        assert!((pairwise_affinity(&e, &longer, &cfg) - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
        let opposite = edge(1.0, vec![-1.0, -2.0]);
        assert_eq!(pairwise_affinity(&e, &opposite, &cfg), 0.0);
    }

    /// Total quadratic affinity of a full assignment `perm` (target i → reference perm[i]).
    fn assignment_affinity(gt: &SceneGraph, gr: &SceneGraph, perm: &[usize], cfg: &AffinityConfig) -> f64 {
        let mut total = 0.0;
        for i in 0..perm.len() {
            total += cfg.node_weight * node_affinity(&gt.nodes[i].feature, &gr.nodes[perm[i]].feature).unwrap();
            for j in 0..perm.len() {
                if let (Some(et), Some(er)) = (gt.edge_between(i, j), gr.edge_between(perm[i], perm[j])) {
                    total += pairwise_affinity(et, er, cfg);
                }
            }
        }
        total
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn recovers_permutation_of_four_node_graph() {
        let ids = ["a", "b", "c", "d"];
        let cs = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.2, 0.0], [1.1, 1.0, 0.3]];
        let fs = vec![
            vec![1.0, 0.1, 0.0, 0.2],
            vec![0.1, 1.0, 0.3, 0.0],
            vec![0.0, 0.2, 1.0, 0.1],
            vec![0.3, 0.0, 0.1, 1.0],
        ];
        let perm = [2usize, 0, 3, 1]; // reference slot k holds target perm[k]
        let rids: Vec<String> = perm.iter().map(|&i| format!("r{}", ids[i])).collect();
        let rids: Vec<&str> = rids.iter().map(String::as_str).collect();
        let rcs: Vec<[f64; 3]> = perm.iter().map(|&i| cs[i]).collect();
        let rfs: Vec<Vec<f64>> = perm.iter().map(|&i| fs[i].clone()).collect();

        let gt = build_graph(&scene(&ids, &cs, &fs), 1.5).unwrap();
        let gr = build_graph(&scene(&rids, &rcs, &rfs), 1.5).unwrap();
        let cfg = AffinityConfig::default();

        let best = permutations(4)
            .into_iter()
            .max_by(|a, b| {
                assignment_affinity(&gt, &gr, a, &cfg).total_cmp(&assignment_affinity(&gt, &gr, b, &cfg))
            })
            .unwrap();

        let m = match_graphs(&gt, &gr, &cfg).unwrap();
        assert_eq!(m.len(), 4);
        for (i, id) in ids.iter().enumerate() {
            let expected = format!("r{id}");
            assert_eq!(m.reference_for(id), Some(expected.as_str()));
            assert_eq!(gr.nodes[best[i]].object_id, expected);
        }
        assert!(m.pairs.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn orthogonal_embeddings_give_no_candidates() {
        let cfg = AffinityConfig {
            min_node_affinity: 0.5,
            ..Default::default()
        };
        let gt = build_graph(&scene(&["a", "b"], &[[0.0; 3], [1.0, 0.0, 0.0]], &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]), 1.5).unwrap();
        let gr = build_graph(&scene(&["c", "d"], &[[0.0; 3], [1.0, 0.0, 0.0]], &[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]), 1.5).unwrap();
        assert!(match_graphs(&gt, &gr, &cfg).unwrap().is_empty());
    }

    #[test]
    fn single_node_score_is_node_weight() {
        let cfg = AffinityConfig {
            node_weight: 0.7,
            ..Default::default()
        };
        let gt = build_graph(&scene(&["a"], &[[0.0; 3]], &[vec![0.6, 0.8]]), 1.5).unwrap();
        let gr = build_graph(&scene(&["b"], &[[5.0, 0.0, 0.0]], &[vec![0.6, 0.8]]), 1.5).unwrap();
        let m = match_graphs(&gt, &gr, &cfg).unwrap();
        assert_eq!(m.len(), 1);
        assert!((m.pairs[0].score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn isolated_objects_still_match() {
        // two far-apart objects plus a connected pair
        let ids = ["a", "b", "c", "d"];
        let cs = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [9.0, 0.0, 0.0]];
        let fs = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let g = build_graph(&scene(&ids, &cs, &fs), 1.5).unwrap();
        let m = match_graphs(&g, &g, &AffinityConfig::default()).unwrap();
        assert_eq!(m.len(), 4);
        for id in ids {
            assert_eq!(m.reference_for(id), Some(id));
        }
    }
}
