//! Continuous feature field over a scene: inverse-distance-weighted
//! interpolation of the `k` nearest stored point features.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneBundle;
use crate::spatial::{KdTree, KnnScratch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub k: usize,
    /// IDW exponent.
    pub power: f64,
    /// Queries closer than this to a sample snap to it (m).
    pub epsilon: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            k: 100,
            power: 2.0,
            epsilon: 1e-9,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("field k must be at least 1"));
        }
        if !(self.power > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("field power and epsilon must be positive"));
        }
        Ok(())
    }
}

/// Immutable after construction; queries are pure and thread-safe.
#[derive(Debug, Clone)]
pub struct FeatureField {
    positions: Vec<Point3<f64>>,
    features: Vec<f64>,
    dim: usize,
    tree: KdTree,
    cfg: FieldConfig,
}

/// Per-thread buffers for [`FeatureField::query_into`].
#[derive(Debug, Default)]
pub struct FieldScratch {
    knn: KnnScratch,
}

impl FeatureField {
    /// Field over every point sample of every object in the scene.
    pub fn build(scene: &SceneBundle, cfg: &FieldConfig) -> Result<Self> {
        let positions = scene.all_points();
        let rows = scene.objects.iter().flat_map(|o| o.point_features.iter().map(Vec::as_slice));
        Self::from_samples(positions, rows, scene.feature_dim, cfg)
    }

    pub fn from_samples<'a>(
        positions: Vec<Point3<f64>>,
        rows: impl IntoIterator<Item = &'a [f64]>,
        dim: usize,
        cfg: &FieldConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if positions.is_empty() {
            return Err(Error::invalid("feature field needs at least one sample"));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut features = Vec::with_capacity(positions.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::invalid(format!("feature row of length {} in a {dim}-D field", row.len())));
            }
            features.extend_from_slice(row);
        }
        if features.len() != positions.len() * dim {
            return Err(Error::invalid("feature rows do not match sample count"));
        }
        let tree = KdTree::new(&positions);
        let cfg = FieldConfig {
            k: cfg.k.min(positions.len()),
            ..cfg.clone()
        };
        Ok(FeatureField {
            positions,
            features,
            dim,
            tree,
            cfg,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Neighbor count actually used (configured k clamped to sample count).
    pub fn effective_k(&self) -> usize {
        self.cfg.k
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn feature(&self, sample: usize) -> &[f64] {
        &self.features[sample * self.dim..(sample + 1) * self.dim]
    }

    pub fn query(&self, q: &Point3<f64>) -> Result<Vec<f64>> {
        if !q.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("non-finite field query"));
        }
        let mut out = vec![0.0; self.dim];
        self.query_into(q, &mut FieldScratch::default(), &mut out);
        Ok(out)
    }

    /// Unchecked query writing into `out` (length `dim`). `q` must be finite.
    pub fn query_into(&self, q: &Point3<f64>, scratch: &mut FieldScratch, out: &mut [f64]) {
        let neighbors = self.tree.knn_with(q, self.cfg.k, &mut scratch.knn);
        out.iter_mut().for_each(|v| *v = 0.0);

        let eps_sq = self.cfg.epsilon * self.cfg.epsilon;
        if neighbors[0].dist_sq < eps_sq {
            let mut count = 0.0;
            for nb in neighbors.iter().take_while(|nb| nb.dist_sq < eps_sq) {
                for (o, f) in out.iter_mut().zip(self.feature(nb.index)) {
                    *o += f;
                }
                count += 1.0;
            }
            out.iter_mut().for_each(|v| *v /= count);
            return;
        }

        let squared = self.cfg.power == 2.0;
        let mut total = 0.0;
        for nb in neighbors {
            let w = if squared {
                1.0 / nb.dist_sq
            } else {
                nb.dist_sq.powf(-0.5 * self.cfg.power)
            };
            total += w;
            for (o, f) in out.iter_mut().zip(self.feature(nb.index)) {
                *o += w * f;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
    }

    /// Indices of the neighbors a query at `q` interpolates over.
    pub fn neighbors(&self, q: &Point3<f64>) -> Vec<usize> {
        self.tree.knn(q, self.cfg.k).into_iter().map(|n| n.index).collect()
    }
}

/// `‖Φ_tgt(p) − Φ_ref(p′)‖₂`, the per-point alignment residual.
pub fn residual(field_tgt: &FeatureField, field_ref: &FeatureField, p: &Point3<f64>, p_ref: &Point3<f64>) -> Result<f64> {
    if field_tgt.dim() != field_ref.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ ({} vs {})",
            field_tgt.dim(),
            field_ref.dim()
        )));
    }
    let a = field_tgt.query(p)?;
    let b = field_ref.query(p_ref)?;
    Ok(feature_distance(&a, &b))
}

pub(crate) fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
