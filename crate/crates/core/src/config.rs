//! Run configuration: one flat TOML table.
//!
//! Values are resolved as defaults < config file < `EGRU_*` environment
//! variables < command-line flags. An environment variable names a key in
//! upper case behind the prefix, e.g. `EGRU_HIDDEN_DIM=256` or
//! `EGRU_PRUNE_TARGETS=[0.5, 0.9]`; its value is parsed as a TOML value and
//! falls back to a string. Unknown keys are rejected from every source.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellKind, LmConfig};
use crate::optim::AdamWConfig;

pub const ENV_PREFIX: &str = "EGRU_";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub include_readout_macs: bool,

    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub test_path: PathBuf,
    /// Vocabulary file; built from the training split when absent.
    pub vocab_path: Option<PathBuf>,

    pub cell: CellKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub tie_weights: bool,
    pub dropconnect: f64,
    pub dropout_in: f64,
    pub dropout_out: f64,
    pub surrogate_scale: f64,
    pub surrogate_width: f64,
    pub forget_bias: f64,
    pub embed_init: f64,
    pub nonneg_thresholds: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_batch_size: usize,
    /// Stop each epoch after this many batches (0 = full pass).
    pub max_batches_per_epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_w: f64,
    pub decay_b: f64,
    pub clip: f64,

    /// Checkpoint read by `prune` and `eval`.
    pub checkpoint: Option<PathBuf>,
    pub prune_targets: Vec<f64>,
    pub finetune_epochs: usize,
    /// Split scored by `eval`: "train", "valid" or "test".
    pub eval_split: String,

    pub sweep_decay_w: Vec<f64>,
    pub sweep_decay_b: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = LmConfig::new(1, CellKind::Egru);
        let opt = AdamWConfig::default();
        Self {
            seed: 1,
            threads: 1,
            out_dir: PathBuf::from("runs/default"),
            include_readout_macs: false,
            train_path: PathBuf::from("data/tiny/train.txt"),
            valid_path: PathBuf::from("data/tiny/valid.txt"),
            test_path: PathBuf::from("data/tiny/test.txt"),
            vocab_path: None,
            cell: lm.cell,
            embed_dim: lm.embed_dim,
            hidden_dim: lm.hidden_dim,
            num_layers: lm.num_layers,
            tie_weights: lm.tie_weights,
            dropconnect: 0.0,
            dropout_in: 0.0,
            dropout_out: 0.0,
            surrogate_scale: lm.surrogate_scale,
            surrogate_width: lm.surrogate_width,
            forget_bias: lm.forget_bias,
            embed_init: lm.embed_init,
            nonneg_thresholds: lm.nonneg_thresholds,
            epochs: 6,
            batch_size: 16,
            seq_len: 35,
            eval_batch_size: 10,
            max_batches_per_epoch: 0,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            decay_w: opt.decay_w,
            decay_b: opt.decay_b,
            clip: 0.25,
            checkpoint: None,
            prune_targets: crate::sparsity::PruneSchedule::up_to(0.9)
                .map(|s| s.targets)
                .unwrap_or_default(),
            finetune_epochs: crate::sparsity::DEFAULT_FINETUNE_EPOCHS,
            eval_split: "test".into(),
            sweep_decay_w: vec![0.0, 0.05, 0.14, 0.3],
            sweep_decay_b: vec![0.0],
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, applies `env` overrides and validates.
    pub fn from_toml_with_env(text: &str, env: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        for (key, value) in env {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            table.insert(name.to_ascii_lowercase(), parse_env_value(value));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let env: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        Self::from_toml_with_env(&text, &env)
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            cell: self.cell,
            dropconnect: self.dropconnect,
            dropout_in: self.dropout_in,
            dropout_out: self.dropout_out,
            tie_weights: self.tie_weights,
            surrogate_scale: self.surrogate_scale,
            surrogate_width: self.surrogate_width,
            forget_bias: self.forget_bias,
            embed_init: self.embed_init,
            nonneg_thresholds: self.nonneg_thresholds,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            decay_w: self.decay_w,
            decay_b: self.decay_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm_config(1).validate()?;
        self.optimizer().validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(
                "batch_size, seq_len and eval_batch_size must be positive".into(),
            ));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::Config("clip must be non-negative".into()));
        }
        if !["train", "valid", "test"].contains(&self.eval_split.as_str()) {
            return Err(Error::Config(format!(
                "unknown eval_split {:?}",
                self.eval_split
            )));
        }
        for d in self.sweep_decay_w.iter().chain(&self.sweep_decay_b) {
            if !(*d >= 0.0) {
                return Err(Error::Config(format!(
                    "sweep decay values must be non-negative, got {d}"
                )));
            }
        }
        Ok(())
    }

    /// The resolved configuration as TOML, headed by the code version.
    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        Ok(format!("# egru-lm {CODE_VERSION}\n{body}"))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn parse_env_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}
