//! One configuration document covering every pipeline stage.
//!
//! | key | default | notes |
//! |---|---|---|
//! | `edge_threshold` | 1.5 m | graph edge cutoff |
//! | `affinity.*` | see [`AffinityConfig`] | spectral matching |
//! | `clustering.eps` / `min_pts` | 0.75 m / 2 | DBSCAN on match translations |
//! | `field.k` / `power` / `epsilon` | 100 / 2 / 1e-9 | IDW neighbors, exponent, snap distance |
//! | `optim.*` | see [`OptimConfig`] | displacement search |
//! | `tps.lambda` / `max_control_points` | 1e-3 / 2000 | |
//! | `eval.thresholds` | 0.15, 0.20, 0.25 m | Chamfer accuracy |
//! | `planning.*` | 0.05 / 0.15 / 0.5 / 0.5 / 1.0 m | occupancy grid and waypoints |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::fine::OptimConfig;
use crate::graph::DEFAULT_EDGE_THRESHOLD;
use crate::matching::AffinityConfig;
use crate::tps::TpsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { eps: 0.75, min_pts: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.15, 0.20, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningConfig {
    pub resolution: f64,
    pub inflation_radius: f64,
    pub bounds_margin: f64,
    /// How far an occupied start or goal may move to reach a free cell.
    pub snap_radius: f64,
    /// Arc-length spacing of waypoints for long transfers.
    pub waypoint_stride: f64,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        PlanningConfig {
            resolution: 0.05,
            inflation_radius: 0.15,
            bounds_margin: 0.5,
            snap_radius: 0.5,
            waypoint_stride: 1.0,
        }
    }
}

impl PlanningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::invalid("planning resolution must be positive"));
        }
        for (name, v) in [
            ("inflation_radius", self.inflation_radius),
            ("bounds_margin", self.bounds_margin),
            ("snap_radius", self.snap_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("planning {name} must be non-negative")));
            }
        }
        if !(self.waypoint_stride > 0.0 && self.waypoint_stride.is_finite()) {
            return Err(Error::invalid("planning waypoint_stride must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Recorded in artifacts; every stage is deterministic regardless.
    pub seed: u64,
    pub edge_threshold: f64,
    pub affinity: AffinityConfig,
    pub clustering: ClusterConfig,
    pub field: FieldConfig,
    pub optim: OptimConfig,
    pub tps: TpsConfig,
    pub eval: EvalConfig,
    pub planning: PlanningConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            affinity: AffinityConfig::default(),
            clustering: ClusterConfig::default(),
            field: FieldConfig::default(),
            optim: OptimConfig::default(),
            tps: TpsConfig::default(),
            eval: EvalConfig::default(),
            planning: PlanningConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge_threshold > 0.0 && self.edge_threshold.is_finite()) {
            return Err(Error::invalid("edge_threshold must be positive"));
        }
        if !(self.clustering.eps > 0.0) || self.clustering.min_pts == 0 {
            return Err(Error::invalid("clustering needs eps > 0 and min_pts >= 1"));
        }
        if self.eval.thresholds.is_empty() || !self.eval.thresholds.iter().all(|t| *t > 0.0 && t.is_finite()) {
            return Err(Error::invalid("eval thresholds must be a non-empty list of positive values"));
        }
        self.affinity.validate()?;
        self.field.validate()?;
        self.optim.validate()?;
        self.tps.validate()?;
        self.planning.validate()
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Format {
            context: context.to_string(),
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(PipelineConfig::from_json("{}", "cfg").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"field": {"k": 8}, "eval": {"thresholds": [0.05]}}"#, "cfg").unwrap();
        assert_eq!(cfg.field.k, 8);
        assert_eq!(cfg.field.power, 2.0);
        assert_eq!(cfg.eval.thresholds, vec![0.05]);
        assert_eq!(cfg.optim, OptimConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = PipelineConfig::from_json(r#"{"optim": {"grid_stepp": 0.1}}"#, "cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("optim") && msg.contains("grid_stepp"), "{msg}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"tps": {"lambda": -1}}"#, "cfg").is_err());
        assert!(PipelineConfig::from_json(r#"{"eval": {"thresholds": []}}"#, "cfg").is_err());
    }

    #[test]
    fn round_trips() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text, "cfg").unwrap(), cfg);
    }
}
