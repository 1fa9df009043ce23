//! `key=value` configuration files for the model and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::model::{FlowPrior, ModelConfig};
use super::train::TrainConfig;
use super::NetworkError;

/// Parsed `key=value` lines. `#` starts a comment; blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, NetworkError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NetworkError::Config(format!("line {}: expected key=value, found {raw:?}", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(NetworkError::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(NetworkError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, NetworkError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| NetworkError::Config(format!("{key}={v}: {e}"))),
        }
    }

    pub fn list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, NetworkError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| NetworkError::Config(format!("{key}={v}: {e}"))))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Reads model keys; missing keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self, NetworkError> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            bins: kv.parse_or("bins", d.bins)?,
            height: kv.parse_or("height", d.height)?,
            width: kv.parse_or("width", d.width)?,
            stem_channels: kv.parse_or("stem_channels", d.stem_channels)?,
            channels: kv.list_or("channels", &d.channels)?,
            hidden: kv.list_or("hidden", &d.hidden)?,
            head_channels: kv.parse_or("head_channels", d.head_channels)?,
            flow_prior: kv.parse_or("flow_prior", FlowPrior::Zero)?,
            leaky_slope: kv.parse_or("leaky_slope", d.leaky_slope)?,
            init_gain: kv.parse_or("init_gain", d.init_gain)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("bins", self.bins);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("stem_channels", self.stem_channels);
        kv.set("channels", join(&self.channels));
        kv.set("hidden", join(&self.hidden));
        kv.set("head_channels", self.head_channels);
        kv.set("flow_prior", self.flow_prior);
        kv.set("leaky_slope", self.leaky_slope);
        kv.set("init_gain", self.init_gain);
    }
}

impl TrainConfig {
    /// Reads training keys. `preset=toy` (default) starts from the desk-scale
    /// settings, `preset=full` from the published large-scale schedule.
    pub fn from_kv(kv: &KeyValues) -> Result<Self, NetworkError> {
        let d = match kv.get("preset").unwrap_or("toy") {
            "toy" => TrainConfig::default(),
            "full" => TrainConfig::full_scale(),
            other => return Err(NetworkError::Config(format!("unknown preset {other:?} (toy|full)"))),
        };
        let cfg = TrainConfig {
            iterations: kv.parse_or("iterations", d.iterations)?,
            learning_rate: kv.parse_or("learning_rate", d.learning_rate)?,
            final_lr_fraction: kv.parse_or("final_lr_fraction", d.final_lr_fraction)?,
            schedule: kv.parse_or("lr_schedule", d.schedule)?,
            beta1: kv.parse_or("beta1", d.beta1)?,
            beta2: kv.parse_or("beta2", d.beta2)?,
            eps: kv.parse_or("eps", d.eps)?,
            batch: kv.parse_or("batch", d.batch)?,
            clip_norm: kv.parse_or("clip_norm", d.clip_norm)?,
            augment: kv.parse_or("augment", d.augment)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("iterations", self.iterations);
        kv.set("learning_rate", self.learning_rate);
        kv.set("final_lr_fraction", self.final_lr_fraction);
        kv.set("lr_schedule", self.schedule);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("batch", self.batch);
        kv.set("clip_norm", self.clip_norm);
        kv.set("augment", self.augment);
        kv.set("seed", self.seed);
    }
}
