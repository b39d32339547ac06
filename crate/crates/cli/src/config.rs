//! Run configuration files.

use std::path::Path;

use msr_core::model::{ModelConfig, Variant};
use msr_core::train::TrainConfig;
use msr_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything `train` needs besides paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Named starting points for configs and ablation budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// lr 1e-3, 200 steps, two groups of width 16.
    Desk,
    /// lr 1e-5, 50 epochs, six groups of width 32.
    Reference,
}

impl RunConfig {
    pub fn profile(profile: Profile, variant: Variant) -> Self {
        match profile {
            Profile::Desk => RunConfig {
                model: variant.apply(&ModelConfig::desk()),
                train: TrainConfig::desk(),
            },
            Profile::Reference => RunConfig {
                model: variant.apply(&ModelConfig::reference()),
                train: TrainConfig::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Parses JSON text, reporting every unknown key before any other
    /// problem, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON: {e}")))?;
        let template = serde_json::to_value(RunConfig::profile(Profile::Desk, Variant::Full))
            .map_err(|e| Error::config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &template, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Pretty JSON with every field spelled out, in declaration order.
    pub fn canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }
}

fn unknown_keys(value: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(t)) = (value, template) else {
        return;
    };
    for (k, child) in v {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match t.get(k) {
            Some(tc) => unknown_keys(child, tc, &path, out),
            None => out.push(path),
        }
    }
}
