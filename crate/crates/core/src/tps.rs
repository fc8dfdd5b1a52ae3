//! Thin-plate-spline maps in 3D with the biharmonic kernel `φ(r) = r`.
//!
//! `F(q) = A q + b + Σ_j w_j φ(‖q − p_j‖)`, fitted by solving
//! `[[K + λI, P], [Pᵀ, 0]] [W; C] = [Y; 0]` with `P = [1 | p]`.

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::coarse::AffineMap;
use crate::error::{Error, Result};
use crate::spatial::KdTree;

/// Sources closer than this are merged into one control point.
pub const DUPLICATE_TOLERANCE: f64 = 1e-9;
/// Smallest singular value of the centered sources below which a fit is
/// refused as coplanar.
pub const DEGENERACY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpsConfig {
    pub lambda: f64,
    /// Control points beyond this count are subsampled with a uniform stride.
    pub max_control_points: usize,
}

impl Default for TpsConfig {
    fn default() -> Self {
        TpsConfig {
            lambda: 1e-3,
            max_control_points: 2000,
        }
    }
}

impl TpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("tps lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.max_control_points < 4 {
            return Err(Error::invalid("tps max_control_points must be at least 4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinePart {
    /// Row-major 3×3.
    pub matrix: [f64; 9],
    pub translation: [f64; 3],
}

impl AffinePart {
    fn from_map(map: &AffineMap) -> Self {
        let m = &map.matrix;
        AffinePart {
            matrix: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
            translation: [map.translation.x, map.translation.y, map.translation.z],
        }
    }

    pub fn matrix3(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.matrix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThinPlateSpline {
    pub control_points: Vec<[f64; 3]>,
    pub kernel_weights: Vec<[f64; 3]>,
    pub affine_part: AffinePart,
    pub lambda: f64,
}

impl ThinPlateSpline {
    /// A spline with no kernel terms.
    pub fn from_affine(map: &AffineMap) -> Self {
        ThinPlateSpline {
            control_points: Vec::new(),
            kernel_weights: Vec::new(),
            affine_part: AffinePart::from_map(map),
            lambda: 0.0,
        }
    }

    pub fn identity() -> Self {
        Self::from_affine(&AffineMap::identity())
    }

    pub fn apply(&self, q: &Point3<f64>) -> Result<Point3<f64>> {
        if !q.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid(format!("non-finite query point {q:?}")));
        }
        Ok(self.apply_unchecked(q))
    }

    pub fn apply_unchecked(&self, q: &Point3<f64>) -> Point3<f64> {
        let m = &self.affine_part.matrix;
        let t = &self.affine_part.translation;
        let mut out = [
            m[0] * q.x + m[1] * q.y + m[2] * q.z + t[0],
            m[3] * q.x + m[4] * q.y + m[5] * q.z + t[1],
            m[6] * q.x + m[7] * q.y + m[8] * q.z + t[2],
        ];
        for (p, w) in self.control_points.iter().zip(&self.kernel_weights) {
            let r = ((q.x - p[0]).powi(2) + (q.y - p[1]).powi(2) + (q.z - p[2]).powi(2)).sqrt();
            out[0] += w[0] * r;
            out[1] += w[1] * r;
            out[2] += w[2] * r;
        }
        Point3::new(out[0], out[1], out[2])
    }
}

/// Uniform stride subsample keeping `cap` of `n` indices: `⌊i·n/cap⌋`.
pub fn stride_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

/// Merges sources within [`DUPLICATE_TOLERANCE`], averaging their targets.
/// The first occurrence keeps its position and order.
fn merge_duplicates(pairs: &[(Point3<f64>, Point3<f64>)]) -> Vec<(Point3<f64>, Point3<f64>)> {
    let sources: Vec<Point3<f64>> = pairs.iter().map(|p| p.0).collect();
    let tree = KdTree::new(&sources);
    let mut rep = vec![usize::MAX; pairs.len()];
    let mut slot_of_rep = vec![usize::MAX; pairs.len()];
    let mut merged: Vec<(Point3<f64>, Vector3<f64>, f64)> = Vec::new();
    for i in 0..pairs.len() {
        let owner = tree
            .within_radius(&sources[i], DUPLICATE_TOLERANCE)
            .into_iter()
            .find(|&j| j < i && rep[j] == j)
            .unwrap_or(i);
        rep[i] = owner;
        if owner == i {
            slot_of_rep[i] = merged.len();
            merged.push((pairs[i].0, pairs[i].1.coords, 1.0));
        } else {
            let slot = &mut merged[slot_of_rep[owner]];
            slot.1 += pairs[i].1.coords;
            slot.2 += 1.0;
        }
    }
    merged
        .into_iter()
        .map(|(s, sum, n)| (s, Point3::from(sum / n)))
        .collect()
}

fn centered_min_singular_value(points: &[Point3<f64>]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let m = DMatrix::from_fn(points.len(), 3, |i, j| points[i][j] - mean[j]);
    m.singular_values().min()
}

/// Fits a spline to `(source, target)` pairs.
pub fn fit_tps(pairs: &[(Point3<f64>, Point3<f64>)], cfg: &TpsConfig) -> Result<ThinPlateSpline> {
    cfg.validate()?;
    if pairs.iter().any(|(s, t)| !s.iter().chain(t.iter()).all(|c| c.is_finite())) {
        return Err(Error::invalid("tps pairs contain non-finite coordinates"));
    }
    let merged = merge_duplicates(pairs);
    let keep = stride_indices(merged.len(), cfg.max_control_points);
    let pairs: Vec<(Point3<f64>, Point3<f64>)> = keep.iter().map(|&i| merged[i]).collect();
    if pairs.len() < 4 {
        return Err(Error::Degenerate(format!(
            "thin-plate spline needs at least 4 distinct sources, got {}; fall back to the affine-only map",
            pairs.len()
        )));
    }
    let sources: Vec<Point3<f64>> = pairs.iter().map(|p| p.0).collect();
    let sigma_min = centered_min_singular_value(&sources);
    if sigma_min <= DEGENERACY_TOLERANCE {
        return Err(Error::Degenerate(format!(
            "thin-plate spline sources are coplanar (smallest singular value {sigma_min:.3e}); fall back to the affine-only map"
        )));
    }

    // polynomial block in centered coordinates for conditioning
    let m = pairs.len();
    let mean = sources.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / m as f64;
    let size = m + 4;
    let mut a = DMatrix::<f64>::zeros(size, size);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = (sources[i] - sources[j]).norm();
        }
        a[(i, i)] += cfg.lambda;
        let c = sources[i].coords - mean;
        let row = [1.0, c.x, c.y, c.z];
        for (k, v) in row.into_iter().enumerate() {
            a[(i, m + k)] = v;
            a[(m + k, i)] = v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(size, 3);
    for (i, (_, t)) in pairs.iter().enumerate() {
        for d in 0..3 {
            rhs[(i, d)] = t[d];
        }
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numerical(format!("thin-plate spline system with {m} control points is singular")))?;

    let kernel_weights = (0..m).map(|i| [sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]]).collect();
    // rows m+1..m+3 hold the linear part (transposed), row m the offset
    let linear = Matrix3::from_fn(|r, c| sol[(m + 1 + c, r)]);
    let offset = Vector3::new(sol[(m, 0)], sol[(m, 1)], sol[(m, 2)]) - linear * mean;
    let map = AffineMap {
        matrix: linear,
        translation: offset,
        kind: crate::coarse::FitKind::Affine,
    };
    Ok(ThinPlateSpline {
        control_points: sources.iter().map(|p| [p.x, p.y, p.z]).collect(),
        kernel_weights,
        affine_part: AffinePart::from_map(&map),
        lambda: cfg.lambda,
    })
}
