//! Run configuration: one flat key-value document covering hyperparameters,
//! mode flags and paths. File values load from TOML; `key=value` overrides
//! apply on top; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptgen::{PromptGenConfig, PromptMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for '{key}': {reason}")]
    Invalid { key: String, reason: String },
    #[error("override '{0}' is not of the form key=value")]
    MalformedOverride(String),
}

/// Where the per-utterance features come from.
pub const SEMANTIC_SOURCE_REFERENCE: &str = "reference";
pub const SEMANTIC_SOURCE_PLM: &str = "plm-shared";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // optimization
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Utterances per optimizer step, reached by accumulating whole
    /// conversations.
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub mode: PromptMode,
    /// Prompt+LM tuning: update the prediction model too.
    pub tune_plm: bool,

    // architecture
    pub n_e: usize,
    pub n_p: usize,
    pub d_u: usize,
    pub d_c: usize,
    pub d_t: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub max_conversation_len: usize,
    pub positional_encoding: bool,
    /// One-sided variants keep all 2(N_e+N_p) pseudo tokens by default;
    /// this flag switches to half-count placement instead.
    pub side_halved: bool,

    // feature extraction
    /// "reference" or "plm-shared" (pool the prediction model's own layers).
    pub semantic_source: String,

    // decoding
    pub open_classification: bool,
    pub thesaurus_path: String,
    /// Comma-separated `label=word` pairs replacing default label words.
    pub verbalizer_overrides: String,

    // data and outputs
    pub adapter: String,
    pub train_path: String,
    pub val_path: String,
    pub test_path: String,
    pub cache_dir: String,
    pub out_dir: String,

    // evaluation harness
    pub eval_split: String,
    /// Seeded repetitions per suite configuration.
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            learning_rate: 5e-6,
            weight_decay: 1e-2,
            batch_size: 64,
            epochs: 10,
            early_stop_patience: 3,
            seed: 0,
            mode: PromptMode::Full,
            tune_plm: true,
            n_e: 3,
            n_p: 3,
            d_u: 1024,
            d_c: 768,
            d_t: 1024,
            encoder_layers: 1,
            encoder_heads: 8,
            lm_layers: 2,
            lm_heads: 8,
            vocab_size: 512,
            max_seq_len: 128,
            max_conversation_len: 128,
            positional_encoding: true,
            side_halved: false,
            semantic_source: SEMANTIC_SOURCE_REFERENCE.to_string(),
            open_classification: false,
            thesaurus_path: String::new(),
            verbalizer_overrides: String::new(),
            adapter: "generic-jsonl".to_string(),
            train_path: String::new(),
            val_path: String::new(),
            test_path: String::new(),
            cache_dir: String::new(),
            out_dir: "runs".to_string(),
            eval_split: "test".to_string(),
            repeats: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedOverride(item.clone()))?;
            table.insert(key.trim().to_string(), parse_toml_value(value.trim()));
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_overrides(overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut table = toml::Table::new();
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedOverride(item.clone()))?;
            table.insert(key.trim().to_string(), parse_toml_value(value.trim()));
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: String| ConfigError::Invalid {
            key: key.to_string(),
            reason,
        };
        if !(self.learning_rate > 0.0) {
            return Err(invalid(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size", "must be at least 1".to_string()));
        }
        if self.n_e < 1 || self.n_p < 1 {
            return Err(invalid("n_e", "n_e and n_p must be at least 1".to_string()));
        }
        if self.d_t % 2 != 0 {
            return Err(invalid("d_t", format!("must be even, got {}", self.d_t)));
        }
        if self.encoder_heads == 0 || self.d_t % self.encoder_heads != 0 {
            return Err(invalid(
                "encoder_heads",
                format!("d_t {} must divide by encoder_heads {}", self.d_t, self.encoder_heads),
            ));
        }
        if self.lm_heads == 0 || self.d_t % self.lm_heads != 0 {
            return Err(invalid(
                "lm_heads",
                format!("d_t {} must divide by lm_heads {}", self.d_t, self.lm_heads),
            ));
        }
        if self.lm_layers == 0 {
            return Err(invalid("lm_layers", "must be at least 1".to_string()));
        }
        if self.vocab_size < 8 {
            return Err(invalid("vocab_size", "must be at least 8".to_string()));
        }
        match self.eval_split.as_str() {
            "train" | "validation" | "test" => {}
            other => {
                return Err(invalid(
                    "eval_split",
                    format!("expected train, validation or test, got '{other}'"),
                ))
            }
        }
        match self.semantic_source.as_str() {
            SEMANTIC_SOURCE_REFERENCE => {}
            SEMANTIC_SOURCE_PLM => {
                if self.d_u != self.d_t {
                    return Err(invalid(
                        "semantic_source",
                        format!(
                            "plm-shared pooling requires d_u == d_t, got d_u={} d_t={}",
                            self.d_u, self.d_t
                        ),
                    ));
                }
            }
            other => {
                return Err(invalid(
                    "semantic_source",
                    format!("expected reference or plm-shared, got '{other}'"),
                ))
            }
        }
        if self.repeats < 1 {
            return Err(invalid("repeats", "must be at least 1".to_string()));
        }
        crate::corpus::DatasetAdapter::parse(&self.adapter)
            .map_err(|e| invalid("adapter", e.to_string()))?;
        Ok(())
    }

    /// Effective feature-cache directory, honoring `CISPER_CACHE_DIR`.
    pub fn cache_dir(&self) -> Option<PathBuf> {
        if let Ok(dir) = std::env::var("CISPER_CACHE_DIR") {
            if !dir.is_empty() {
                return Some(PathBuf::from(dir));
            }
        }
        if self.cache_dir.is_empty() {
            None
        } else {
            Some(PathBuf::from(&self.cache_dir))
        }
    }

    pub fn verbalizer_override_map(&self) -> Result<BTreeMap<String, String>, ConfigError> {
        let mut map = BTreeMap::new();
        for pair in self.verbalizer_overrides.split(',') {
            let pair = pair.trim();
            if pair.is_empty() {
                continue;
            }
            let (label, word) = pair.split_once('=').ok_or_else(|| ConfigError::Invalid {
                key: "verbalizer_overrides".to_string(),
                reason: format!("entry '{pair}' is not label=word"),
            })?;
            map.insert(label.trim().to_lowercase(), word.trim().to_lowercase());
        }
        Ok(map)
    }

    pub fn promptgen_config(&self) -> PromptGenConfig {
        PromptGenConfig {
            d_u: self.d_u,
            d_c: self.d_c,
            d_t: self.d_t,
            n_e: self.n_e,
            n_p: self.n_p,
            encoder_layers: self.encoder_layers,
            encoder_heads: self.encoder_heads,
            positional: self.positional_encoding,
            max_conversation_len: self.max_conversation_len,
            seed: self.seed,
        }
    }

    /// The full key set with current values as a flat TOML document (used
    /// for `--help` and for writing template configs).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the full configuration, recorded in run metadata.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    if raw == "true" {
        return toml::Value::Boolean(true);
    }
    if raw == "false" {
        return toml::Value::Boolean(false);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}
