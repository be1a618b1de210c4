//! The JSON run configuration shared by all subcommands, with `KEY=VALUE`
//! overrides applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::DEFAULT_LANGS;
use crate::decision::{StrategyKind, TuneMetric};
use crate::synthetic::SyntheticConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config key {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config key {key}: {file} does not exist")]
    MissingPath { key: String, file: PathBuf },
    #[error("malformed override {0:?}, expected KEY=VALUE")]
    BadOverride(String),
    #[error("config key {0} is required by this command")]
    Required(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingsConfig {
    /// Feature-hashing encoder computed on the fly.
    Hash {
        #[serde(default = "default_hash_d")]
        d: usize,
        #[serde(default = "default_hash_seq")]
        seq: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Precomputed EMB1 file.
    File { path: PathBuf },
}

fn default_hash_d() -> usize {
    768
}
fn default_hash_seq() -> usize {
    511
}

impl Default for EmbeddingsConfig {
    fn default() -> Self {
        EmbeddingsConfig::Hash {
            d: default_hash_d(),
            seq: default_hash_seq(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub seed: u64,
    /// Fraction of each language's pages used for training.
    pub train_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_ratio: 0.9,
        }
    }
}

/// Which pages predict, tune-threshold and friends operate on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    #[default]
    Dev,
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Logit threshold used when no per-language table is given.
    pub theta: f64,
    /// Per-language threshold table written by tune-threshold.
    pub thresholds: Option<PathBuf>,
    pub tune_metric: TuneMetric,
    /// Include raw scores in predictions.
    pub scores: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::ThresholdWithMax,
            theta: 0.0,
            thresholds: None,
            tune_metric: TuneMetric::MacroF1,
            scores: false,
        }
    }
}

fn default_langs() -> Vec<String> {
    DEFAULT_LANGS.iter().map(|s| s.to_string()).collect()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Taxonomy TSV; the bundled ENE taxonomy when absent.
    #[serde(default)]
    pub ontology: Option<PathBuf>,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: EmbeddingsConfig,
    /// Training languages in schedule order.
    #[serde(default = "default_langs")]
    pub langs: Vec<String>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub subset: Subset,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

/// Sets `path` (dotted) in `root` to `value`, creating objects on the way.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(path.to_string()));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(ConfigError::Invalid {
                path: keys[..i].join("."),
                message: "is not an object, cannot set a field inside it".into(),
            });
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}

/// Parses `KEY=VALUE`; the value is read as JSON when it parses, otherwise
/// as a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Deserializes with the offending key path in the error.
    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Invalid {
                path: if path == "." { "(root)".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })
    }

    /// Reads the optional config file, applies overrides in order, and checks
    /// that every referenced input path exists.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
                    path: "(root)".into(),
                    message: e.to_string(),
                })?
            }
            None => Value::Object(Default::default()),
        };
        for (k, v) in overrides {
            apply_override(&mut root, k, v.clone())?;
        }
        let cfg = Self::from_value(root)?;
        cfg.check_paths()?;
        if let Some(t) = &cfg.train {
            t.validate().map_err(|e| ConfigError::Invalid {
                path: "train".into(),
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    fn check_paths(&self) -> Result<(), ConfigError> {
        let mut inputs: Vec<(&str, &PathBuf)> = Vec::new();
        if let Some(p) = &self.ontology {
            inputs.push(("ontology", p));
        }
        if let Some(p) = &self.corpus {
            inputs.push(("corpus", p));
        }
        if let EmbeddingsConfig::File { path } = &self.embeddings {
            inputs.push(("embeddings.path", path));
        }
        if let Some(p) = &self.checkpoint {
            inputs.push(("checkpoint", p));
        }
        if let Some(p) = &self.predictions {
            inputs.push(("predictions", p));
        }
        if let Some(p) = &self.strategy.thresholds {
            inputs.push(("strategy.thresholds", p));
        }
        for (key, file) in inputs {
            if !file.exists() {
                return Err(ConfigError::MissingPath {
                    key: key.to_string(),
                    file: file.clone(),
                });
            }
        }
        Ok(())
    }

    /// The effective configuration, defaults included.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
