//! TOML configuration files.
//!
//! A training config holds the [`TrainConfig`] fields at the top level and
//! an optional `[run]` table for the driver:
//!
//! ```toml
//! hidden = 64
//! learning_rate = 1e-4
//!
//! [run]
//! eval_split = "eval"
//! recall = [10, 50]
//! ```

use std::fs;
use std::path::Path;

use ccnet_core::synth::SyntheticSpec;
use ccnet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Write `<out>.epoch-NNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Split scored for the best-eval snapshot; none skips evaluation.
    pub eval_split: Option<String>,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
    pub recall: Vec<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            checkpoint_every: 1,
            eval_split: None,
            eval_every: 1,
            recall: vec![10, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run: RunOptions,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.train).expect("config serializes");
        table.insert("run".into(), toml::Value::try_from(&self.run).expect("options serialize"));
        toml::to_string(&table).expect("table serializes")
    }
}

pub fn parse_run_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| format_err(path, e.to_string()))?;
    let run = match table.remove("run") {
        Some(v) => v.try_into().map_err(|e: toml::de::Error| format_err(path, e.to_string()))?,
        None => RunOptions::default(),
    };
    let train: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| format_err(path, e.to_string()))?;
    train.validate()?;
    Ok(RunConfig { train, run })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_run_config(&text, path)
}

pub fn parse_synthetic_spec(text: &str, path: &Path) -> Result<SyntheticSpec> {
    let spec: SyntheticSpec = toml::from_str(text).map_err(|e| format_err(path, e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_synthetic_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_synthetic_spec(&text, path)
}
