//! Application configuration: defaults, JSON config files and dotted-key
//! overrides, merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::BackendConfig;
use crate::losses::LossWeights;
use crate::metrics::{Mode, DEFAULT_BG_THRESHOLD, DEFAULT_POINTS};
use crate::pipeline::PipelineConfig;
use crate::prompt::ConditionSet;
use crate::trainer::TrainConfig;

/// Config path used when no `--config` flag is given.
pub const CONFIG_ENV: &str = "MAGICFORGE_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("bad override {key}: {message}")]
    Override { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub conditions: ConditionSet,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection { conditions: ConditionSet::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: Mode,
    pub bg_threshold: f64,
    /// Points per image for p-mIoU.
    pub points: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { mode: Mode::Miou, bg_threshold: DEFAULT_BG_THRESHOLD, points: DEFAULT_POINTS, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub prompt: PromptSection,
    pub backend: BackendConfig,
    pub pipeline: PipelineConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl AppConfig {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&s).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Loads `explicit` if given, else the file named by [`CONFIG_ENV`],
    /// else defaults. Returns the path actually used.
    pub fn resolve(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>), ConfigError> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        match path {
            Some(p) => Ok((Self::load(&p)?, Some(p))),
            None => Ok((Self::default(), None)),
        }
    }

    /// Sets a dotted key such as `train.lr` or `prompt.conditions`.
    /// `raw` is parsed as JSON when possible, otherwise taken as a string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let bad = |message: String| ConfigError::Override { key: key.to_string(), message };
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = self.to_value();
        let pointer = format!("/{}", key.replace('.', "/"));
        let slot = tree.pointer_mut(&pointer).ok_or_else(|| bad("unknown key".into()))?;
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Override { key: o.to_string(), message: "expected key=value".into() })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = ConfigError::Invalid;
        ConditionSet::new(self.prompt.conditions.as_slice().to_vec()).map_err(|e| invalid(format!("prompt.conditions: {e}")))?;
        self.backend.validate().map_err(|e| invalid(e.to_string()))?;
        self.pipeline.validate().map_err(invalid)?;
        self.loss.validate().map_err(invalid)?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.bg_threshold) {
            return Err(invalid(format!("eval.bg_threshold must be in [0,1], got {}", e.bg_threshold)));
        }
        if e.points == 0 {
            return Err(invalid("eval.points must be >= 1".into()));
        }
        Ok(())
    }

    /// The effective configuration, echoed into output artifacts.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config is serializable")
    }
}
