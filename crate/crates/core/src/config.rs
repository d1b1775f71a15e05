//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! hidden = 32
//! base_lr = 0.001
//! dropout.relation = 0.3
//! ```
//!
//! Values are applied over defaults; later layers (command-line flags)
//! override earlier ones through [`RunConfig::set`].

use std::collections::BTreeSet;

use crate::encoder::EncoderConfig;
use crate::error::{Error, LineError, Result};
use crate::heads::{RegressionTarget, TaskId};
use crate::mtl::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Encoder defaults with the synthetic-suite training preset.
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::suite_preset(),
        }
    }
}

/// Splits `key = value` lines. Reports every malformed or repeated key.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = vec![];
    let mut errors = vec![];
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(LineError {
                line: i + 1,
                message: format!("expected key = value, got `{line}`"),
            });
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            errors.push(LineError {
                line: i + 1,
                message: format!("bad key `{k}`"),
            });
        } else if !seen.insert(k.to_string()) {
            errors.push(LineError {
                line: i + 1,
                message: format!("key {k} repeated"),
            });
        } else {
            out.push((i + 1, k.to_string(), v.to_string()));
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Parse { what: "config", errors })
    }
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (e, t) = (&mut self.encoder, &mut self.train);
        match key {
            "hidden" => e.hidden = value(key, v)?,
            "layers" => e.layers = value(key, v)?,
            "heads" => e.heads = value(key, v)?,
            "ffn_width" => e.ffn_width = value(key, v)?,
            "max_len" => e.max_len = value(key, v)?,
            "encoder_dropout" => e.dropout_rate = value(key, v)?,
            "epoch_max" => t.epoch_max = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "base_lr" => t.base_lr = value(key, v)?,
            "warmup_frac" => t.warmup_frac = value(key, v)?,
            "max_grad_norm" => t.max_grad_norm = value(key, v)?,
            "dropout_rate" => t.dropout_rate = value(key, v)?,
            "seed" => t.seed = value(key, v)?,
            "alpha" => t.alpha = value(key, v)?,
            "regression_target" => {
                t.regression_target = match v {
                    "teacher" => RegressionTarget::Teacher,
                    "blend" => RegressionTarget::Blend,
                    _ => return Err(Error::Config(format!("regression_target must be teacher or blend, got `{v}`"))),
                }
            }
            _ => match key.strip_prefix("dropout.") {
                Some(task) => {
                    t.task_dropout.insert(task.parse::<TaskId>()?, value(key, v)?);
                }
                None => return Err(Error::Config(format!("unknown config key {key}"))),
            },
        }
        Ok(())
    }

    /// Applies every setting of a config file; reports all bad lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut errors = vec![];
        for (line, k, v) in parse_kv(text)? {
            if let Err(e) = self.set(&k, &v) {
                errors.push(LineError {
                    line,
                    message: e.to_string(),
                });
            }
        }
        if !errors.is_empty() {
            return Err(Error::Parse { what: "config", errors });
        }
        Ok(())
    }

    /// Defaults overlaid with a config file's settings.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Canonical text form; [`Self::from_text`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let (e, t) = (&self.encoder, &self.train);
        let mut s = format!(
            "hidden = {}\nlayers = {}\nheads = {}\nffn_width = {}\nmax_len = {}\nencoder_dropout = {}\n\
             epoch_max = {}\nbatch_size = {}\nbase_lr = {}\nwarmup_frac = {}\nmax_grad_norm = {}\n\
             dropout_rate = {}\nseed = {}\nalpha = {}\nregression_target = {}\n",
            e.hidden,
            e.layers,
            e.heads,
            e.ffn_width,
            e.max_len,
            e.dropout_rate,
            t.epoch_max,
            t.batch_size,
            t.base_lr,
            t.warmup_frac,
            t.max_grad_norm,
            t.dropout_rate,
            t.seed,
            t.alpha,
            match t.regression_target {
                RegressionTarget::Teacher => "teacher",
                RegressionTarget::Blend => "blend",
            }
        );
        for (task, r) in &t.task_dropout {
            s.push_str(&format!("dropout.{task} = {r}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()
    }
}
