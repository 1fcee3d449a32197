//! Flat `key=value` run configurations.
//!
//! A [`RunConfig`] starts from a command's defaults, is overlaid by an
//! optional config file and then by explicit command-line flags. The fully
//! resolved form is written next to every run's outputs and can be fed back
//! with `--config` to reproduce the run.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::{Activation, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, TrainConfig};

/// Value of an optional key that is unset.
pub const NONE: &str = "none";

pub const VERIFY_DEFAULTS: &[(&str, &str)] =
    &[("seed", "1"), ("max-size", "10"), ("corrupt", "false")];

pub const EMBED_JOINT_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("d", "5"),
    ("k", "1"),
    ("method", "exact"),
    ("steps", "10000"),
    ("lr", "200"),
    ("strict-pmi", "false"),
    ("samples", "100000"),
    ("epochs", "5"),
    ("batch", "100"),
    ("alpha", "1"),
    ("optimizer", "adaptive_moments"),
    ("sampled-lr", "0.01"),
    ("clip", "5"),
];

pub const TRAIN_LM_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("mode", "neglm"),
    ("encoder", "lstm"),
    ("d", "300"),
    ("hidden", "300"),
    ("layers", "2"),
    ("window", "1"),
    ("activation", "tanh"),
    ("dropout", "0.5"),
    ("optimizer", "sgd_decay"),
    ("lr", "1"),
    ("decay", "1.2"),
    ("decay-start", "6"),
    ("epochs", "39"),
    ("clip", "5"),
    ("batch", "20"),
    ("unroll", "20"),
    ("k", "100"),
    ("alpha", "0.75"),
    ("log-z", "0"),
    ("vocab-size", NONE),
    ("min-count", NONE),
    ("share-negatives", "false"),
    ("reject-collisions", "false"),
    ("drop-partial", "false"),
];

pub const EVAL_DEFAULTS: &[(&str, &str)] = &[("mode", "stored")];

pub const GEN_BIGRAM_DEFAULTS: &[(&str, &str)] = &[
    ("seed", "7"),
    ("states", "50"),
    ("rank", "6"),
    ("scale", "0.5"),
    ("train-tokens", "200000"),
    ("valid-tokens", "20000"),
    ("test-tokens", "20000"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: String,
    entries: Vec<(String, String)>,
}

impl RunConfig {
    pub fn new(command: &str, defaults: &[(&str, &str)]) -> Self {
        RunConfig {
            command: command.to_string(),
            entries: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Overwrite a known key.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => {
                entry.1 = value.to_string();
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!(
                "unknown key {key:?} for command {}",
                self.command
            ))),
        }
    }

    /// Overwrite `key` only when `value` is present.
    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    /// Overlay `key=value` lines. Blank lines and `#` comments are skipped; a
    /// `command` key must match this config's command.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "command" {
                if value != self.command {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("config is for command {value:?}, not {:?}", self.command),
                    });
                }
                continue;
            }
            self.set(key, value).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("missing key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|e| Error::InvalidArgument(format!("{key}={raw}: {e}")))
    }

    /// Like [`RunConfig::get`] but maps [`NONE`] to `None`.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.raw(key)? == NONE {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Short hex digest of the resolved text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_string().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// [`TrainConfig`] from the LM training keys.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            optimizer: self.get::<OptimizerKind>("optimizer")?,
            lr: self.get("lr")?,
            decay_factor: self.get("decay")?,
            decay_start_epoch: self.get("decay-start")?,
            epochs: self.get("epochs")?,
            clip_norm: self.get("clip")?,
            batch_size: self.get("batch")?,
            unroll: self.get("unroll")?,
            k: self.get("k")?,
            alpha: self.get("alpha")?,
            seed: self.get("seed")?,
            share_negatives: self.get("share-negatives")?,
            reject_collisions: self.get("reject-collisions")?,
            drop_partial_windows: self.get("drop-partial")?,
            nce_log_z: self.get("log-z")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`EncoderSpec`] from the LM encoder keys; `d` is the input embedding width.
    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let d = self.get("d")?;
        let hidden = self.get("hidden")?;
        let spec = match self.get::<EncoderKind>("encoder")? {
            EncoderKind::Window => EncoderSpec::window(d, hidden, self.get("window")?),
            EncoderKind::Lstm => EncoderSpec::lstm(d, hidden, self.get("layers")?),
        }
        .with_dropout(self.get("dropout")?)
        .with_activation(self.get::<Activation>("activation")?);
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "command={}", self.command)?;
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
