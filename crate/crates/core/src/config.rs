//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments run to the end of the line
//! model.variant = EDED
//! train.loss_weights = 1.0, 0.5, 0.5
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{ModelConfig, Variant};
use crate::data::{AugmentConfig, Scenario, SceneSpec};
use crate::error::{io_err, Error, Result};
use crate::train::TrainConfig;

/// Every key with its default value, in rendering order.
pub const KEYS: [(&str, &str); 17] = [
    ("model.variant", "EDED"),
    ("model.max_width", "16"),
    ("model.exchange_position", "3"),
    ("model.cbam", "true"),
    ("train.lr", "0.001"),
    ("train.weight_decay", "0.001"),
    ("train.epochs", "100"),
    ("train.batch", "4"),
    ("train.warmup", "3"),
    ("train.patience", "12"),
    ("train.augment", "true"),
    ("train.loss_weights", "1, 0.5, 0.5"),
    ("data.scenario", "svbcd"),
    ("data.count", "64"),
    ("data.size", "64"),
    ("data.kappa", "0.75"),
    ("seed", "0"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub max_width: usize,
    pub exchange_position: usize,
    pub cbam: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup: usize,
    pub patience: usize,
    pub augment: bool,
    pub loss_weights: [f64; 3],
    pub scenario: Scenario,
    pub count: usize,
    pub size: usize,
    pub kappa: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            variant: Variant::Eded,
            max_width: 0,
            exchange_position: 0,
            cbam: false,
            lr: 0.0,
            weight_decay: 0.0,
            epochs: 0,
            batch: 0,
            warmup: 0,
            patience: 0,
            augment: false,
            loss_weights: [0.0; 3],
            scenario: Scenario::Svbcd,
            count: 0,
            size: 0,
            kappa: 0.0,
            seed: 0,
        };
        for (key, value) in KEYS {
            cfg.set(key, value).expect("valid default");
        }
        cfg
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.variant" => self.variant = parse_value(key, value)?,
            "model.max_width" => self.max_width = parse_value(key, value)?,
            "model.exchange_position" => self.exchange_position = parse_value(key, value)?,
            "model.cbam" => self.cbam = parse_value(key, value)?,
            "train.lr" => self.lr = parse_value(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, value)?,
            "train.epochs" => self.epochs = parse_value(key, value)?,
            "train.batch" => self.batch = parse_value(key, value)?,
            "train.warmup" => self.warmup = parse_value(key, value)?,
            "train.patience" => self.patience = parse_value(key, value)?,
            "train.augment" => self.augment = parse_value(key, value)?,
            "train.loss_weights" => {
                let parts = value
                    .split(',')
                    .map(|p| parse_value::<f64>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.loss_weights = parts
                    .try_into()
                    .map_err(|p: Vec<f64>| Error::Config(format!("{key}: expected 3 weights, got {}", p.len())))?;
            }
            "data.scenario" => self.scenario = parse_value(key, value)?,
            "data.count" => self.count = parse_value(key, value)?,
            "data.size" => self.size = parse_value(key, value)?,
            "data.kappa" => self.kappa = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => {
                let known: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
                return Err(Error::Config(format!("unknown key `{key}` (known keys: {})", known.join(", "))));
            }
        }
        Ok(())
    }

    /// Parse configuration text over the defaults. Unknown and repeated keys
    /// are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config: "))))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.lr and train.weight_decay must be finite and non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be positive".into()));
        }
        self.scene_spec().validate()
    }

    /// Text form accepted by [`RunConfig::parse`], one key per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }

    fn value(&self, key: &str) -> String {
        match key {
            "model.variant" => self.variant.to_string(),
            "model.max_width" => self.max_width.to_string(),
            "model.exchange_position" => self.exchange_position.to_string(),
            "model.cbam" => self.cbam.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.warmup" => self.warmup.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.augment" => self.augment.to_string(),
            "train.loss_weights" => self.loss_weights.map(|w| w.to_string()).join(", "),
            "data.scenario" => self.scenario.to_string(),
            "data.count" => self.count.to_string(),
            "data.size" => self.size.to_string(),
            "data.kappa" => self.kappa.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("rendered keys come from KEYS"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            max_width: self.max_width,
            exchange_position: self.exchange_position,
            cbam: self.cbam,
            loss_weights: self.loss_weights,
            seed: self.seed,
        }
    }

    /// Overwrite the model keys from a model configuration.
    pub fn with_model(mut self, m: &ModelConfig) -> Self {
        self.variant = m.variant;
        self.max_width = m.max_width;
        self.exchange_position = m.exchange_position;
        self.cbam = m.cbam;
        self.loss_weights = m.loss_weights;
        self.seed = m.seed;
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch: self.batch,
            warmup: self.warmup,
            patience: self.patience,
            augment: self.augment.then(AugmentConfig::default),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            kappa: self.kappa,
            ..SceneSpec::with_size(self.size)
        }
    }
}

/// The model keys of a configuration, as stored in checkpoints.
pub fn model_echo(m: &ModelConfig) -> String {
    let full = RunConfig::default().with_model(m);
    let mut out = String::new();
    for key in ["model.variant", "model.max_width", "model.exchange_position", "model.cbam", "train.loss_weights", "seed"] {
        let _ = writeln!(out, "{key} = {}", full.value(key));
    }
    out
}

/// Inverse of [`model_echo`].
pub fn parse_model_echo(text: &str) -> Result<ModelConfig> {
    Ok(RunConfig::parse(text)?.model_config())
}
