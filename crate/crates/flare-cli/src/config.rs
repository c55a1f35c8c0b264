//! Run configuration: a flat JSON object with dotted keys covering the model
//! and the training loop.
//!
//! Sources merge in fixed precedence: built-in defaults, then the config
//! file, then the FLARE_SEED environment variable (seeds only), then CLI
//! overrides. Unknown keys are rejected rather than ignored, and every run
//! writes the fully resolved result next to its outputs.

use flare_core::model::ModelConfig;
use flare_core::train::TrainConfig;
use flare_core::{Error, Result};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

/// Every accepted dotted key, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "model.blocks",
    "model.channels",
    "model.heads",
    "model.latents",
    "model.d_in",
    "model.d_out",
    "model.kv_layers",
    "model.ff_layers",
    "model.io_layers",
    "model.layer_norm_eps",
    "model.seed",
    "model.mixer_enabled",
    "train.epochs",
    "train.batch_size",
    "train.lr_max",
    "train.warmup_frac",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.clip_max_norm",
    "train.seed",
    "train.precision",
];

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Accumulates key/value pairs in precedence order; last write wins.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    flat: BTreeMap<String, Value>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigBuilder {
    pub fn new() -> Self {
        ConfigBuilder {
            flat: flatten(&RunConfig::default()),
        }
    }

    /// Merges a JSON file of flat dotted keys over the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let obj = parsed.as_object().ok_or_else(|| {
            Error::InvalidConfig(format!("{}: top level must be a JSON object", path.display()))
        })?;
        for (key, value) in obj {
            self.set_value(key, value.clone())?;
        }
        Ok(())
    }

    /// FLARE_SEED overrides both seeds; file values lose, CLI flags win.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var("FLARE_SEED") {
            let seed: u64 = raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("FLARE_SEED must be an unsigned integer, got {raw:?}"))
            })?;
            self.set_value("model.seed", Value::from(seed))?;
            self.set_value("train.seed", Value::from(seed))?;
        }
        Ok(())
    }

    /// One `key=value` override from the command line. The value is parsed
    /// as JSON when possible and falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override {assignment:?} is not of the form key=value"))
        })?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set_value(key, value)
    }

    /// Convenience for `--seed`: overrides both seeds at once.
    pub fn apply_seed(&mut self, seed: u64) -> Result<()> {
        self.set_value("model.seed", Value::from(seed))?;
        self.set_value("train.seed", Value::from(seed))
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
        }
        self.flat.insert(key.to_string(), value);
        Ok(())
    }

    /// The merged flat object, for writing `resolved.json`.
    pub fn resolved(&self) -> Value {
        Value::Object(self.flat.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    /// Assembles and validates the final configuration.
    pub fn finish(&self) -> Result<RunConfig> {
        let mut model = serde_json::Map::new();
        let mut train = serde_json::Map::new();
        for (key, value) in &self.flat {
            let (section, field) = key.split_once('.').expect("keys are dotted");
            match section {
                "model" => model.insert(field.to_string(), value.clone()),
                _ => train.insert(field.to_string(), value.clone()),
            };
        }
        let model: ModelConfig = serde_json::from_value(Value::Object(model))
            .map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        let train: TrainConfig = serde_json::from_value(Value::Object(train))
            .map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        let cfg = RunConfig { model, train };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The flat dotted-key image of a configuration.
pub fn flatten(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    let model = serde_json::to_value(&cfg.model).expect("model config serializes");
    let train = serde_json::to_value(&cfg.train).expect("train config serializes");
    for (prefix, value) in [("model", model), ("train", train)] {
        for (field, v) in value.as_object().expect("configs are objects") {
            out.insert(format!("{prefix}.{field}"), v.clone());
        }
    }
    out
}
