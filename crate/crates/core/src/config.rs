//! Model and training configuration, read from a TOML key-value file with
//! `[model]`, `[train]` and optional `[plan]` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::footprint::PrecisionPlan;
use crate::layers::FfnVariant;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 0 means "derive from the training corpus".
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Nominal FFN width; the 1-bit branch gets `d_ffn_nominal - r`.
    pub d_ffn_nominal: usize,
    /// Hidden width of each 8-bit branch.
    pub r: usize,
    pub n_branches: usize,
    pub r_alignment: usize,
    pub alpha_init: f32,
    pub beta_init: f32,
    pub ffn_variant: FfnVariant,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            max_seq_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn_nominal: 256,
            r: 32,
            n_branches: 1,
            r_alignment: 32,
            alpha_init: 2.0,
            beta_init: 0.2,
            ffn_variant: FfnVariant::Decoupled,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| if v == 0 { Err(cfg_err(format!("{name} must be positive"))) } else { Ok(()) };
        pos("max_seq_len", self.max_seq_len)?;
        pos("d_model", self.d_model)?;
        pos("n_layers", self.n_layers)?;
        pos("n_heads", self.n_heads)?;
        pos("d_ffn_nominal", self.d_ffn_nominal)?;
        if self.d_model % self.n_heads != 0 {
            return Err(cfg_err(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(cfg_err("norm_eps must be positive"));
        }
        if self.ffn_variant == FfnVariant::Decoupled {
            pos("r", self.r)?;
            pos("n_branches", self.n_branches)?;
            pos("r_alignment", self.r_alignment)?;
            if self.r % self.r_alignment != 0 {
                return Err(cfg_err(format!("r = {} is not a multiple of {}", self.r, self.r_alignment)));
            }
            if self.r >= self.d_ffn_nominal {
                return Err(cfg_err(format!("r = {} must be below d_ffn_nominal = {}", self.r, self.d_ffn_nominal)));
            }
            if !(self.alpha_init.is_finite() && self.beta_init.is_finite()) {
                return Err(cfg_err("alpha_init / beta_init must be finite"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Hidden width of the 1-bit FFN path.
    pub fn bit_hidden(&self) -> usize {
        match self.ffn_variant {
            FfnVariant::Decoupled => self.d_ffn_nominal - self.r,
            FfnVariant::Binary => self.d_ffn_nominal,
        }
    }

    /// Number of 8-bit branches actually built.
    pub fn branches(&self) -> usize {
        match self.ffn_variant {
            FfnVariant::Decoupled => self.n_branches,
            FfnVariant::Binary => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub phase1_end_lr: f64,
    pub phase2_start_lr: f64,
    pub final_lr: f64,
    pub wd_phase1: f64,
    pub wd_phase2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Tokens per optimizer step (`batch · seq_len`).
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Trailing fraction of the corpus held out for evaluation.
    pub eval_fraction: f64,
    /// Number of evaluation windows (0 = all non-overlapping windows).
    pub eval_windows: usize,
    /// Record metrics every `log_every` steps (the last step is always logged).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let peak = 3e-3;
        Self {
            total_steps: 2000,
            warmup_steps: 500,
            peak_lr: peak,
            phase1_end_lr: 0.5 * peak,
            phase2_start_lr: 0.1 * peak,
            final_lr: 0.01 * peak,
            wd_phase1: 0.1,
            wd_phase2: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            batch_tokens: 16 * 1024,
            seq_len: 64,
            seed: 0,
            grad_clip: 1.0,
            eval_fraction: 0.1,
            eval_windows: 64,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        (self.batch_tokens / self.seq_len).max(1)
    }

    pub fn midpoint(&self) -> usize {
        self.total_steps / 2
    }

    /// Rescales the four learning-rate anchors to a new peak, keeping ratios.
    pub fn with_peak_lr(mut self, peak: f64) -> Self {
        let s = peak / self.peak_lr;
        self.peak_lr = peak;
        self.phase1_end_lr *= s;
        self.phase2_start_lr *= s;
        self.final_lr *= s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_tokens < self.seq_len {
            return Err(cfg_err("batch_tokens must hold at least one seq_len window"));
        }
        if self.total_steps > 0 && !(self.warmup_steps > 0 && 2 * self.warmup_steps < self.total_steps) {
            return Err(cfg_err(format!(
                "need 0 < warmup_steps ({}) < total_steps/2 ({})",
                self.warmup_steps,
                self.total_steps / 2
            )));
        }
        if !(self.peak_lr >= self.phase1_end_lr
            && self.phase1_end_lr > self.phase2_start_lr
            && self.phase2_start_lr > self.final_lr
            && self.final_lr >= 0.0)
        {
            return Err(cfg_err(
                "learning rates must satisfy peak >= phase1_end > phase2_start > final >= 0",
            ));
        }
        if !(self.peak_lr > self.phase2_start_lr) {
            return Err(cfg_err("peak_lr must exceed phase2_start_lr"));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(cfg_err(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.wd_phase1 >= 0.0 && self.wd_phase2 >= 0.0 && self.grad_clip >= 0.0 && self.adam_eps > 0.0) {
            return Err(cfg_err("weight decay, grad_clip must be >= 0 and adam_eps > 0"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(cfg_err("eval_fraction must lie in (0, 1)"));
        }
        if self.log_every == 0 {
            return Err(cfg_err("log_every must be positive"));
        }
        Ok(())
    }
}

/// The full config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PrecisionPlan>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), plan: None };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_misaligned_r() {
        let m = ModelConfig { r: 48, ..ModelConfig::default() };
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        let m = ModelConfig { r: 256, ..ModelConfig::default() };
        assert!(m.validate().is_err());
        let m = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(m.validate().is_err());
    }

    #[test]
    fn rejects_bad_schedule() {
        let t = TrainConfig { warmup_steps: 1000, ..TrainConfig::default() };
        assert!(t.validate().is_err());
        let t = TrainConfig { phase2_start_lr: 0.002, ..TrainConfig::default() };
        assert!(t.validate().is_err());
        let t = TrainConfig { total_steps: 0, ..TrainConfig::default() };
        assert!(t.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(RunConfig::from_toml("[model]\nd_model = 64\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd_model = 64\n").is_ok());
    }
}
