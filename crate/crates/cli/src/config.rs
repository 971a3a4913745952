//! Config files (TOML, or JSON by extension) and flag overrides.

use std::path::Path;

use mvft::data::{SplitPolicy, SynthSpec};
use mvft::{FusionMode, ModelKind, TrainConfig, ViewMask};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub policy: SplitPolicy,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            policy: SplitPolicy::RandomStratified,
            ratios: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub window_len: usize,
    /// Hop between windows; defaults to `window_len`.
    pub stride: Option<usize>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            window_len: 30,
            stride: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub prepare: PrepareConfig,
}

/// Flags that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub views: Option<ViewMask>,
    pub model: Option<ModelKind>,
    pub fusion_mode: Option<FusionMode>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.views {
            cfg.views = v;
        }
        if let Some(v) = self.model {
            cfg.kind = v;
        }
        if let Some(v) = self.fusion_mode {
            cfg.model.fusion_mode = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
    }
}

/// Reads `path` as JSON when it ends in `.json`, TOML otherwise. Any read
/// or parse problem is a config failure.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        mvft::report::from_json_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    path.map_or_else(|| Ok(RunConfig::default()), load)
}

pub fn load_synth_spec(path: &Path) -> Result<SynthSpec, Failure> {
    load(path)
}
