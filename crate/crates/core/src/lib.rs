//! Coarse-to-fine estimation of 3D scene analogies.

pub mod cli;
pub mod coarse;
pub mod config;
pub mod dbscan;
pub mod error;
pub mod eval;
pub mod field;
pub mod fine;
pub mod graph;
pub mod matching;
pub mod pipeline;
pub mod scene;
pub mod spatial;
pub mod testkit;
pub mod tps;
pub mod transfer;

pub use error::{Error, Result};
