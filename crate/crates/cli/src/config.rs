//! Run configuration file.
//!
//! One TOML (or `.json`) document with a table per command:
//!
//! ```toml
//! [synth]      # data generation
//! [labels]     # estimator label construction
//! [estimator]  # estimator model and training
//! [train]      # dialogue model training; defaults to the desk preset
//! [eval]       # decoding for eval and generate
//! [serve]      # HTTP service
//! ```
//!
//! Keys left out keep their defaults. Unknown keys are rejected with their
//! full dotted path.

use std::fmt;
use std::path::{Path, PathBuf};

use hear_core::decode::DecodeConfig;
use hear_core::HearError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SECTIONS: [&str; 6] = ["synth", "labels", "estimator", "train", "eval", "serve"];

/// Relative run directories resolve under this directory when it is set.
pub const RUN_ROOT_ENV: &str = "HEAR_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at {}: {}", self.path, self.reason)
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn new(path: impl Into<String>, reason: impl fmt::Display) -> Self {
        Self { path: path.into(), reason: reason.to_string() }
    }

    /// Maps a core validation error onto `section`.
    pub fn from_core(section: &str, err: HearError) -> anyhow::Error {
        match err {
            HearError::Config { field, reason } => Self::new(format!("{section}.{field}"), reason).into(),
            other => other.into(),
        }
    }
}

/// Parsed configuration file, or an empty one.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    source: Option<PathBuf>,
    root: serde_json::Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        Ok(Self { source: Some(path.to_path_buf()), ..Self::parse(&text, is_json)? })
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, ConfigError> {
        let value: Value = if json {
            serde_json::from_str(text).map_err(|e| ConfigError::new("<root>", e))?
        } else {
            let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new("<root>", e.message()))?;
            serde_json::to_value(table).map_err(|e| ConfigError::new("<root>", e))?
        };
        let Value::Object(root) = value else {
            return Err(ConfigError::new("<root>", "expected a table of sections"));
        };
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(ConfigError::new(k.clone(), format!("unknown section, expected one of {}", SECTIONS.join(", "))));
        }
        Ok(Self { source: None, root })
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// The `name` table laid over `default`.
    pub fn section<T: Serialize + DeserializeOwned>(&self, name: &str, default: T) -> Result<T, ConfigError> {
        let Some(over) = self.root.get(name) else { return Ok(default) };
        if !over.is_object() {
            return Err(ConfigError::new(name, "expected a table"));
        }
        let mut base = serde_json::to_value(default).map_err(|e| ConfigError::new(name, e))?;
        merge(&mut base, over.clone());
        serde_path_to_error::deserialize(base).map_err(|e| {
            let inner = e.path().to_string();
            let path = if inner == "." { name.to_string() } else { format!("{name}.{inner}") };
            ConfigError::new(path, e.into_inner())
        })
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `[eval]`: decoding for `eval` and `generate`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub decode: DecodeConfig,
    /// Also decode with the audio stream zeroed.
    pub without_audio: bool,
}

/// `[serve]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    /// Append-only session journal, replayed on start.
    pub journal: Option<PathBuf>,
    pub max_question_tokens: usize,
    pub decode: DecodeConfig,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), journal: None, max_question_tokens: 64, decode: DecodeConfig::default() }
    }
}

/// Resolves a run directory against [`RUN_ROOT_ENV`].
pub fn resolve_run_dir(path: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
