//! TOML experiment configuration with dotted-key overrides.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! root = "/data/ldct"
//!
//! [model]
//! architecture = "small_unet"
//! channels = 8
//!
//! [trainer]
//! k_steps = 5
//! alpha = 0.1
//! noise = { sigma = 10.0 }
//! ```
//!
//! Precedence is file, then `BLINDSPOT_DATA_ROOT`, then `--set key=value`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::HuWindow;
use crate::error::{Error, Result};
use crate::inference::{InferenceConfig, InferenceMode, DEFAULT_OVERLAP};
use crate::nn::DenoiserSpec;
use crate::trainer::TrainConfig;

pub const DATA_ROOT_ENV: &str = "BLINDSPOT_DATA_ROOT";

/// The synthetic phantom benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub side: usize,
    /// Corruption standard deviation on the 0–255 scale.
    pub corruption_sigma: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 50,
            side: 128,
            corruption_sigma: 25.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub window: HuWindow,
    pub benchmark: BenchmarkConfig,
}

/// Inference settings; unset `k_samples` and `alpha` follow the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub k_samples: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub tile_side: Option<usize>,
    pub overlap: usize,
    pub mode: InferenceMode,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            k_samples: None,
            alpha: None,
            seed: 0,
            tile_side: Some(128),
            overlap: DEFAULT_OVERLAP,
            mode: InferenceMode::Averaged,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: DenoiserSpec,
    pub trainer: TrainConfig,
    pub inference: InferenceSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` and applies `key.path=value` overrides on top.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`), then the environment, then overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut all = Vec::new();
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                all.push(format!("data.root={}", toml::Value::String(root)));
            }
        }
        all.extend(overrides.iter().cloned());
        Self::with_overrides(&text, &all)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.data.window.validate()?;
        self.inference_config().validate()
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            k_samples: self.inference.k_samples.unwrap_or(self.trainer.k_steps),
            alpha: self.inference.alpha.unwrap_or(self.trainer.alpha),
            seed: self.inference.seed,
            tile_side: self.inference.tile_side,
            overlap: self.inference.overlap,
            mode: self.inference.mode,
            keep_per_mask_outputs: false,
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sets `a.b.c=value` in `doc`; the value is parsed as a TOML literal and
/// falls back to a bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for part in path {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}' passes through a non-table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
