//! Run configuration: every hyperparameter in one `key=value` record.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::capsnet::LabelMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Batch norm, two BiLSTMs, capsule layer with routing.
    Caps,
    /// BiLSTM baseline with mean pooling over time.
    Lstm,
    /// BiLSTM baseline with attention pooling.
    Att,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Caps => "caps",
            ModelKind::Lstm => "lstm",
            ModelKind::Att => "att",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caps" => Ok(ModelKind::Caps),
            "lstm" => Ok(ModelKind::Lstm),
            "att" => Ok(ModelKind::Att),
            _ => Err(Error::Config(format!("unknown model `{s}` (caps, lstm, att)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub caps_dim: usize,
    pub routing_iters: usize,
    pub use_decoder: bool,
    pub recon_weight: f64,
    pub lambda: f64,
    /// Units per LSTM direction.
    pub hidden_size: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Frames per example after padding or truncation.
    pub t_fix: usize,
    pub seed: u64,
    pub mode: LabelMode,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Caps,
            caps_dim: 16,
            routing_iters: 3,
            use_decoder: false,
            recon_weight: 0.1,
            lambda: 0.5,
            hidden_size: 64,
            dropout: 0.3,
            lr: 1e-3,
            batch_size: 32,
            epochs: 50,
            t_fix: 100,
            seed: 0,
            mode: LabelMode::Single,
            threshold: 0.5,
        }
    }
}

pub const CONFIG_KEYS: [&str; 15] = [
    "model",
    "caps_dim",
    "routing_iters",
    "use_decoder",
    "recon_weight",
    "lambda",
    "hidden_size",
    "dropout",
    "lr",
    "batch_size",
    "epochs",
    "t_fix",
    "seed",
    "mode",
    "threshold",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// Splits `key=value`, trimming both sides.
pub fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn default_lambda(mode: LabelMode) -> f64 {
        match mode {
            LabelMode::Single => 0.5,
            LabelMode::Multi => 1.0,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = value.parse()?,
            "caps_dim" => self.caps_dim = parse_value(key, value)?,
            "routing_iters" => self.routing_iters = parse_value(key, value)?,
            "use_decoder" => self.use_decoder = parse_bool(key, value)?,
            "recon_weight" => self.recon_weight = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "hidden_size" => self.hidden_size = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "t_fix" => self.t_fix = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => self.mode = value.parse().map_err(|_| Error::Config(format!("invalid mode `{value}`")))?,
            "threshold" => self.threshold = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies pairs in order, then validates. Setting `mode` without
    /// `lambda` in the same batch resets lambda to the mode's default.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<()> {
        let mut mode_set = false;
        let mut lambda_set = false;
        for (k, v) in pairs {
            self.set(k.as_ref(), v.as_ref())?;
            mode_set |= k.as_ref() == "mode";
            lambda_set |= k.as_ref() == "lambda";
        }
        if mode_set && !lambda_set {
            self.lambda = Self::default_lambda(self.mode);
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(split_pair)
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = Self::default();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model" => self.model.to_string(),
            "caps_dim" => self.caps_dim.to_string(),
            "routing_iters" => self.routing_iters.to_string(),
            "use_decoder" => self.use_decoder.to_string(),
            "recon_weight" => self.recon_weight.to_string(),
            "lambda" => self.lambda.to_string(),
            "hidden_size" => self.hidden_size.to_string(),
            "dropout" => self.dropout.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "t_fix" => self.t_fix.to_string(),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.as_str().to_string(),
            "threshold" => self.threshold.to_string(),
            _ => return None,
        })
    }

    /// Every field as `key=value`, one per line, in [`CONFIG_KEYS`] order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("known key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.caps_dim < 2 {
            return fail("caps_dim must be at least 2");
        }
        if self.routing_iters < 1 {
            return fail("routing_iters must be at least 1");
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return fail("recon_weight must be finite and non-negative");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be positive");
        }
        if self.hidden_size == 0 || self.batch_size == 0 || self.t_fix == 0 {
            return fail("hidden_size, batch_size and t_fix must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
