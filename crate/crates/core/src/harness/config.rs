//! Run configuration from a TOML file, `DOCRAG_*` environment variables and
//! command-line flags, later sources overriding earlier ones.
//!
//! ```toml
//! corpus = "data/corpus.jsonl"
//! queries = "data/queries.jsonl"
//! t_max = 10
//! k = 5
//! weights = [0.1, 0.1, 0.1, 0.1, 0.6]
//! judge_url = "http://localhost:9000/judge"
//! image_mode = "base64"
//! ```
//!
//! Environment variables use the upper-cased key: `DOCRAG_T_MAX=6`,
//! `DOCRAG_WEIGHTS=0.2,0.2,0.2,0.2,0.2`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environment::SessionConfig;
use crate::perception::{Interpolation, ZoomConfig};
use crate::retrieval::DEFAULT_DIMS;
use crate::rewards::RewardWeights;

pub const ENV_PREFIX: &str = "DOCRAG_";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// Pixels inline as base64 PNG.
    #[default]
    Base64,
    /// `file://` URLs for file-backed pages.
    FileUrl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub t_max: usize,
    pub k: usize,
    pub dims: usize,
    pub max_prompt_chars: usize,
    pub max_response_chars: usize,
    pub zoom_target_long_side: u32,
    pub zoom_min_crop_side: u32,
    pub interpolation: Interpolation,
    pub weights: RewardWeights,
    pub judge_url: Option<String>,
    pub policy_url: Option<String>,
    pub policy_model: Option<String>,
    pub retriever_url: Option<String>,
    pub image_mode: ImageMode,
    pub parallelism: usize,
    pub port: u16,
}

impl Default for Config {
    fn default() -> Self {
        let s = SessionConfig::default();
        Self {
            corpus: None,
            queries: None,
            template: None,
            t_max: s.t_max,
            k: s.k,
            dims: DEFAULT_DIMS,
            max_prompt_chars: s.max_prompt_chars,
            max_response_chars: s.max_response_chars,
            zoom_target_long_side: s.zoom.target_long_side,
            zoom_min_crop_side: s.zoom.min_crop_side,
            interpolation: s.zoom.interpolation,
            weights: RewardWeights::default(),
            judge_url: None,
            policy_url: None,
            policy_model: None,
            retriever_url: None,
            image_mode: ImageMode::default(),
            parallelism: 4,
            port: 8080,
        }
    }
}

const KEYS: &[&str] = &[
    "corpus",
    "queries",
    "template",
    "t_max",
    "k",
    "dims",
    "max_prompt_chars",
    "max_response_chars",
    "zoom_target_long_side",
    "zoom_min_crop_side",
    "interpolation",
    "weights",
    "judge_url",
    "policy_url",
    "policy_model",
    "retriever_url",
    "image_mode",
    "parallelism",
    "port",
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("config: {0}")]
    Parse(String),
}

/// Interprets an environment value as a TOML scalar or array, falling back
/// to a comma-separated list of numbers, then to a plain string.
fn env_value(raw: &str) -> toml::Value {
    if let Ok(t) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    if raw.contains(',') {
        let nums: Option<Vec<toml::Value>> = raw
            .split(',')
            .map(|p| p.trim().parse::<f64>().ok().map(toml::Value::Float))
            .collect();
        if let Some(nums) = nums {
            return toml::Value::Array(nums);
        }
    }
    toml::Value::String(raw.to_string())
}

impl Config {
    /// Merges `file` (if any), then `env` pairs, then `flags`.
    pub fn layered(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: toml::Table,
    ) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io(p.into(), e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for (name, raw) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX).map(str::to_ascii_lowercase) else {
                continue;
            };
            if KEYS.contains(&key.as_str()) {
                let v = match key.as_str() {
                    // paths and urls stay strings even if they parse as TOML
                    "corpus" | "queries" | "template" | "judge_url" | "policy_url"
                    | "policy_model" | "retriever_url" | "image_mode" | "interpolation" => {
                        toml::Value::String(raw)
                    }
                    _ => env_value(&raw),
                };
                table.insert(key, v);
            }
        }
        table.extend(flags);
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.weights
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.session()
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads the process environment.
    pub fn load(file: Option<&Path>, flags: toml::Table) -> Result<Self, ConfigError> {
        Self::layered(file, std::env::vars(), flags)
    }

    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            t_max: self.t_max,
            k: self.k,
            zoom: ZoomConfig {
                target_long_side: self.zoom_target_long_side,
                min_crop_side: self.zoom_min_crop_side,
                interpolation: self.interpolation,
            },
            max_prompt_chars: self.max_prompt_chars,
            max_response_chars: self.max_response_chars,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "t_max = 3\nk = 2\nport = 1\n").unwrap();
        let env = vec![
            ("DOCRAG_K".to_string(), "4".to_string()),
            ("DOCRAG_PORT".to_string(), "7".to_string()),
            (
                "DOCRAG_WEIGHTS".to_string(),
                "0.2,0.2,0.2,0.2,0.2".to_string(),
            ),
            ("OTHER_K".to_string(), "9".to_string()),
            ("DOCRAG_LOG".to_string(), "debug".to_string()),
        ];
        let mut flags = toml::Table::new();
        flags.insert("port".into(), toml::Value::Integer(9));
        let cfg = Config::layered(Some(&path), env, flags).unwrap();
        assert_eq!(cfg.t_max, 3);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.port, 9);
        assert_eq!(cfg.weights.0, [0.2; 5]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(Config::layered(Some(&path), vec![], toml::Table::new()).is_err());
        let env = vec![("DOCRAG_T_MAX".to_string(), "0".to_string())];
        assert!(Config::layered(None, env, toml::Table::new()).is_err());
    }
}
