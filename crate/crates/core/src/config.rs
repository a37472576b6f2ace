//! Run configuration for the command-line tool.
//!
//! A config file is a JSON object whose keys mirror [`RunConfig`]. It is
//! merged key by key over the defaults, so a file only needs the values it
//! changes; unknown keys are rejected. `key.path=value` overrides are merged
//! the same way after the file.

use crate::experiments::{self, AblationGrid, CorpusRecipe, EvalConfig, ReferenceSet, SwitchConfig};
use crate::samplers::SnrSampler;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config root must be a JSON object")]
    NotAnObject,
    #[error("override {0:?} must look like key.path=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Density tables and Monte Carlo checks for a list of samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub samplers: Vec<SnrSampler>,
    /// Rows per density table.
    pub grid: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub mc_samples: usize,
    /// Histogram bins over the lambda range and over `(0, 1)`.
    pub bins: usize,
    pub seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        let (lo, hi) = crate::samplers::DEFAULT_LAMBDA_RANGE;
        Self {
            samplers: vec![
                SnrSampler::uniform_time(),
                SnrSampler::sd3_default(),
                SnrSampler::style_friendly_default(),
                SnrSampler::edm_log_normal(-1.2, 1.2).expect("valid"),
            ],
            grid: 2001,
            lambda_min: lo,
            lambda_max: hi,
            mc_samples: 1_000_000,
            bins: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Base checkpoint; defaults to `out_dir/base.snrf`.
    pub base: Option<PathBuf>,
    /// Adapter checkpoint; `finetune` writes `out_dir/adapter.snrf` when
    /// unset, `sample` and `switch` then use the base alone.
    pub adapter: Option<PathBuf>,
    pub analyze: AnalyzeConfig,
    pub corpus: CorpusRecipe,
    pub pretrain: TrainConfig,
    pub reference: ReferenceSet,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub switch: SwitchConfig,
    pub ablate: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            base: None,
            adapter: None,
            analyze: AnalyzeConfig::default(),
            corpus: CorpusRecipe::default(),
            pretrain: experiments::pretrain_config(),
            reference: ReferenceSet::default(),
            finetune: experiments::finetune_config(SnrSampler::style_friendly_default(), 32, 0),
            eval: EvalConfig::default(),
            switch: SwitchConfig::default(),
            ablate: AblationGrid::default(),
        }
    }
}

/// Recursively merges `patch` into `base`. Objects merge per key; any other
/// value, and any object carrying a `kind` tag (a sampler), replaces the
/// old one.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Parses `a.b.c=value` into a nested object. The value is read as JSON,
/// falling back to a plain string.
pub fn parse_override(s: &str) -> Result<Value, ConfigError> {
    let (path, raw) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(s.to_string()));
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

impl RunConfig {
    /// Defaults, then each patch in order.
    pub fn from_patches(patches: impl IntoIterator<Item = Value>) -> Result<Self, ConfigError> {
        let mut v = serde_json::to_value(Self::default())?;
        for p in patches {
            if !p.is_object() {
                return Err(ConfigError::NotAnObject);
            }
            merge(&mut v, p);
        }
        let cfg: Self = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional config file and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut patches = Vec::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            patches.push(serde_json::from_str(&text)?);
        }
        for o in overrides {
            patches.push(parse_override(o)?);
        }
        Self::from_patches(patches)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if t.steps == 0 {
                return bad(format!("{name}.steps must be >= 1"));
            }
            t.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if self.finetune.lora.is_none() {
            return bad("finetune.lora is required".into());
        }
        if self.analyze.grid < 2 || self.analyze.bins == 0 || self.analyze.mc_samples == 0 {
            return bad("analyze needs grid >= 2, bins >= 1 and mc_samples >= 1".into());
        }
        if !(self.analyze.lambda_min < self.analyze.lambda_max) {
            return bad("analyze.lambda_min must be below lambda_max".into());
        }
        if self.eval.samples == 0 || self.switch.samples == 0 {
            return bad("sample counts must be >= 1".into());
        }
        for (name, g) in [("eval", &self.eval.generation), ("switch", &self.switch.generation)] {
            g.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if self.switch.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("switch.fractions must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn base_path(&self) -> PathBuf {
        self.base.clone().unwrap_or_else(|| self.out_dir.join("base.snrf"))
    }

    pub fn adapter_out_path(&self) -> PathBuf {
        self.adapter.clone().unwrap_or_else(|| self.out_dir.join("adapter.snrf"))
    }
}
