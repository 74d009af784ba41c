//! Report schemas written by `eval` and `compare`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use coordemb::training::TrainConfig;

pub const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "+",
    env!("BUILD_GIT_DESC")
);

/// Per-distortion evaluation entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineEntry {
    /// The raw `"scale,shear,deg,tx,ty"` parameter string.
    pub params: String,
    pub map: f64,
    /// `map - base map`.
    pub delta_vs_base: f64,
}

/// Output of `eval`: base metrics plus optional per-distortion metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub task: String,
    pub variant: String,
    pub config_hash: u32,
    pub checkpoint: String,
    pub data: String,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub affine: BTreeMap<String, AffineEntry>,
    pub wall_clock_seconds: f64,
}

/// One trained run inside a comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRun {
    pub variant: String,
    pub seed: u64,
    pub config_hash: u32,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub affine: BTreeMap<String, AffineEntry>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Signed per-seed difference of the headline metric between two variants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub positive_on_all_seeds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub version: String,
    pub task: String,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
    pub runs: Vec<CompareRun>,
    /// `variant -> metric -> aggregate over seeds`.
    pub aggregates: BTreeMap<String, BTreeMap<String, Aggregate>>,
    /// coordemb minus vanilla on the task's headline metric.
    pub coordemb_minus_vanilla: MetricDelta,
    pub wall_clock_seconds: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Aggregate {
        mean,
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}
