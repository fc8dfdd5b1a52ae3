//! Chamfer accuracy: the fraction of mapped target points that land within
//! a threshold of some reference point.

use std::fmt::Write as _;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::SceneMap;
use crate::scene::SceneBundle;
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub point_count: usize,
    /// Nearest-reference distance per mapped point, in input order.
    pub distances: Vec<f64>,
}

impl EvalReport {
    /// Plain-text table: a header with the thresholds and one row of
    /// accuracies, columns aligned.
    pub fn table(&self, row_label: &str) -> String {
        let width = row_label.len().max("Chamfer Acc.".len());
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "Chamfer Acc.");
        for t in &self.thresholds {
            let _ = write!(s, "  {t:>5.2}");
        }
        s.push('\n');
        let _ = write!(s, "{row_label:<width$}");
        for a in &self.accuracies {
            let _ = write!(s, "  {a:>5.2}");
        }
        s.push('\n');
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Accuracy at `t` counts distances strictly below `t`.
pub fn chamfer_accuracy(mapped: &[Point3<f64>], reference: &[Point3<f64>], thresholds: &[f64]) -> Result<EvalReport> {
    if mapped.is_empty() || reference.is_empty() {
        return Err(Error::invalid("chamfer accuracy needs non-empty mapped and reference point sets"));
    }
    if thresholds.is_empty() || !thresholds.iter().all(|t| *t > 0.0) {
        return Err(Error::invalid("chamfer thresholds must be a non-empty list of positive values"));
    }
    if mapped.iter().chain(reference).any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::invalid("chamfer inputs contain non-finite coordinates"));
    }
    let tree = KdTree::new(reference);
    let distances: Vec<f64> = mapped
        .par_iter()
        .map(|p| tree.nearest(p).expect("non-empty reference").dist())
        .collect();
    let n = distances.len() as f64;
    let accuracies = thresholds
        .iter()
        .map(|&t| distances.iter().filter(|&&d| d < t).count() as f64 / n)
        .collect();
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        accuracies,
        point_count: distances.len(),
        distances,
    })
}

/// Maps every target point sample and scores it against all reference
/// point samples.
pub fn evaluate_map(map: &SceneMap, scene_tgt: &SceneBundle, scene_ref: &SceneBundle, thresholds: &[f64]) -> Result<EvalReport> {
    let mapped = scene_tgt
        .all_points()
        .par_iter()
        .map(|p| map.apply(p))
        .collect::<Result<Vec<_>>>()?;
    chamfer_accuracy(&mapped, &scene_ref.all_points(), thresholds)
}
