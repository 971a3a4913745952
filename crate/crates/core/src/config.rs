//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{MvftError, Result};
use crate::views::N_STATS;

/// How the fusion attention picks key and value sources for each stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Temporal attends with keys from frequent and values from statistic,
    /// frequent with (statistic, temporal), statistic with (temporal, frequent).
    #[default]
    Cyclic,
    /// Keys and values are the concatenation of the other streams.
    ConcatKv,
}

impl std::str::FromStr for FusionMode {
    type Err = MvftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(FusionMode::Cyclic),
            "concat_kv" | "concat-kv" => Ok(FusionMode::ConcatKv),
            other => Err(MvftError::config(format!(
                "unknown fusion mode `{other}` (use cyclic or concat_kv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Per-view encoders joined by fusion attention.
    #[default]
    Mvft,
    /// Selected views concatenated into one self-attention stream.
    Baseline,
}

impl std::str::FromStr for ModelKind {
    type Err = MvftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvft" => Ok(ModelKind::Mvft),
            "baseline" | "transformer" => Ok(ModelKind::Baseline),
            other => Err(MvftError::config(format!(
                "unknown model `{other}` (use mvft or baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Samples per window (T).
    pub window_len: usize,
    /// Sensor channels per sample (C).
    pub channels: usize,
    pub n_class: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Rows of the time-delta embedding table.
    pub n_buckets: usize,
    /// Clock units per unit of bucketed delay.
    pub time_quantum: f64,
    /// Add the per-view segment vectors.
    pub use_segment: bool,
    /// Run the fusion sublayer in encoder blocks.
    pub fusion: bool,
    pub fusion_mode: FusionMode,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_len: 30,
            channels: 3,
            n_class: 6,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 1,
            n_buckets: 16,
            time_quantum: 1.0,
            use_segment: true,
            fusion: true,
            fusion_mode: FusionMode::Cyclic,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MvftError::Config(m));
        if self.window_len < 2 {
            return fail(format!("window_len must be >= 2, got {}", self.window_len));
        }
        if self.channels == 0 || self.n_class == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("channels, n_class, d_model and d_ff must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            ));
        }
        if self.n_buckets == 0 {
            return fail("n_buckets must be positive".into());
        }
        if !(self.time_quantum > 0.0 && self.time_quantum.is_finite()) {
            return fail(format!("time_quantum must be positive, got {}", self.time_quantum));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ln_eps <= 0.0 {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Spectrum bins per channel, `⌊T/2⌋ + 1`.
    pub fn freq_len(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Rows of the position table: the longest view plus its [CLS] slot.
    pub fn max_len(&self) -> usize {
        self.window_len.max(self.freq_len()).max(N_STATS) + 1
    }

    /// A tiny configuration for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            window_len: 4,
            channels: 2,
            n_class: 3,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            n_buckets: 4,
            ..Default::default()
        }
    }
}
