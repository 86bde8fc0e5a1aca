//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! at most once; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::train::{Optimizer, TrainConfig};

/// Default activation budget for the batch-size search: 256 MiB.
pub const DEFAULT_MEMORY_BUDGET: u64 = 256 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub memory_budget_bytes: u64,
    pub gate_heads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            memory_budget_bytes: DEFAULT_MEMORY_BUDGET,
            gate_heads: 2,
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value {raw:?} for {key}"),
    })
}

fn optional_f64(line: usize, key: &str, raw: &str) -> Result<Option<f64>> {
    if raw == "none" {
        Ok(None)
    } else {
        value(line, key, raw).map(Some)
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<String> = Vec::new();
    let mut momentum = None;
    let mut optimizer = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, raw) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got {trimmed:?}"),
        })?;
        let (key, raw) = (key.trim(), raw.trim());
        if seen.iter().any(|k| k == key) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key {key}"),
            });
        }
        seen.push(key.to_string());
        match key {
            "d_model" => cfg.encoder.d_model = value(line, key, raw)?,
            "n_layers" => cfg.encoder.n_layers = value(line, key, raw)?,
            "n_heads" => cfg.encoder.n_heads = value(line, key, raw)?,
            "d_ff" => cfg.encoder.d_ff = value(line, key, raw)?,
            "max_len" => cfg.encoder.max_len = value(line, key, raw)?,
            "dropout" => cfg.encoder.dropout = value(line, key, raw)?,
            "lr_encoder" => cfg.train.lr_encoder = value(line, key, raw)?,
            "lr_head" => cfg.train.lr_head = value(line, key, raw)?,
            "epochs" => cfg.train.epochs = value(line, key, raw)?,
            "batch_size" => cfg.train.batch_size = value(line, key, raw)?,
            "seed" => cfg.train.seed = value(line, key, raw)?,
            "clip_norm" => cfg.train.clip_norm = optional_f64(line, key, raw)?,
            "target_dev_accuracy" => cfg.train.target_dev_accuracy = optional_f64(line, key, raw)?,
            "optimizer" => optimizer = Some((line, raw.to_string())),
            "momentum" => momentum = Some(value::<f64>(line, key, raw)?),
            "memory_budget_bytes" => cfg.memory_budget_bytes = value(line, key, raw)?,
            "gate_heads" => cfg.gate_heads = value(line, key, raw)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key {key}"),
                })
            }
        }
    }
    cfg.train.optimizer = match optimizer.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "adam")) => {
            if momentum.is_some() {
                return Err(Error::Config("momentum applies to the sgd optimizer only".into()));
            }
            Optimizer::default()
        }
        Some((_, "sgd")) => Optimizer::Sgd {
            momentum: momentum.unwrap_or(0.0),
        },
        Some((line, other)) => {
            return Err(Error::Parse {
                line,
                message: format!("unknown optimizer {other:?}"),
            })
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.memory_budget_bytes == 0 {
            return Err(Error::Config("memory_budget_bytes must be >= 1".into()));
        }
        if self.gate_heads == 0 || !self.encoder.d_model.is_multiple_of(self.gate_heads) {
            return Err(Error::Config(format!(
                "gate_heads {} must divide d_model {}",
                self.gate_heads, self.encoder.d_model
            )));
        }
        Ok(())
    }

    /// Renders the configuration in the format [`parse_config`] reads.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "d_model = {}", e.d_model);
        let _ = writeln!(s, "n_layers = {}", e.n_layers);
        let _ = writeln!(s, "n_heads = {}", e.n_heads);
        let _ = writeln!(s, "d_ff = {}", e.d_ff);
        let _ = writeln!(s, "max_len = {}", e.max_len);
        let _ = writeln!(s, "dropout = {}", e.dropout);
        let _ = writeln!(s, "lr_encoder = {}", t.lr_encoder);
        let _ = writeln!(s, "lr_head = {}", t.lr_head);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "clip_norm = {}", opt(t.clip_norm));
        let _ = writeln!(s, "target_dev_accuracy = {}", opt(t.target_dev_accuracy));
        match t.optimizer {
            Optimizer::Adam { .. } => {
                let _ = writeln!(s, "optimizer = adam");
            }
            Optimizer::Sgd { momentum } => {
                let _ = writeln!(s, "optimizer = sgd");
                let _ = writeln!(s, "momentum = {momentum}");
            }
        }
        let _ = writeln!(s, "memory_budget_bytes = {}", self.memory_budget_bytes);
        let _ = writeln!(s, "gate_heads = {}", self.gate_heads);
        s
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    parse_config(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
