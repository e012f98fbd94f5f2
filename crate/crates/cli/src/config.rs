//! Flat `key=value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Sections are
//! `model`, `train`, `decode`, `data` and `bench`. Later overrides (flags)
//! replace file values.

use std::fmt;
use std::path::Path;

use orthrus_core::model::ModelConfig;
use orthrus_core::training::{Masking, Objective, TrainConfig};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeSettings {
    /// Inference block size; `None` means the checkpoint's trained K.
    pub k: Option<usize>,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub eos: Option<u32>,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            k: None,
            temperature: 0.0,
            max_new_tokens: 64,
            seed: 0,
            eos: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Deterministic,
    Markov,
    Bytes,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSettings {
    pub kind: DataKind,
    pub pattern: Vec<u32>,
    pub states: usize,
    pub dominant: f64,
    pub tokens: usize,
    pub seed: u64,
    pub path: Option<String>,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            kind: DataKind::Markov,
            pattern: vec![0, 1, 2],
            states: 8,
            dominant: 0.8,
            tokens: 60_000,
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BenchSettings {
    pub k_values: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub data: DataSettings,
    pub bench: BenchSettings,
}

/// A config problem located in a file line or a flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub origin: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.origin, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: expected {what}, got {value:?}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s, "comma-separated integers"))
        .collect()
}

fn optional<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Option<T>, String> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value, what).map(Some)
    }
}

impl RunConfig {
    /// Apply one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        if key.starts_with("model.") {
            return match self.model.set_kv(key, value) {
                Ok(true) => Ok(()),
                Ok(false) => Err(format!("unknown key {key:?}")),
                Err(e) => Err(e.to_string()),
            };
        }
        let t = &mut self.train;
        let d = &mut self.decode;
        let data = &mut self.data;
        match key {
            "train.learning_rate" => t.learning_rate = parse(key, value, "number")?,
            "train.warmup_ratio" => t.warmup_ratio = parse(key, value, "number")?,
            "train.grad_clip_norm" => t.grad_clip_norm = parse(key, value, "number")?,
            "train.weight_decay" => t.weight_decay = parse(key, value, "number")?,
            "train.epochs" => t.epochs = parse(key, value, "integer")?,
            "train.micro_batch" => t.micro_batch = parse(key, value, "integer")?,
            "train.grad_accum" => t.grad_accum = parse(key, value, "integer")?,
            "train.blocks_per_seq" => t.blocks_per_seq = parse(key, value, "integer")?,
            "train.seq_len" => t.seq_len = parse(key, value, "integer")?,
            "train.separator" => t.separator = optional(key, value, "token id")?,
            "train.seed" => t.seed = parse(key, value, "integer")?,
            "train.schedule" if value == "cosine" => {}
            "train.schedule" => return Err(format!("{key}: only \"cosine\" is supported, got {value:?}")),
            "train.objective" => {
                t.objective = match value {
                    "forward_kl" => Objective::ForwardKl,
                    "cross_entropy" => Objective::CrossEntropy,
                    _ => return Err(format!("{key}: expected forward_kl or cross_entropy, got {value:?}")),
                }
            }
            "train.masking" => {
                t.masking = match value {
                    "full" => Masking::Full,
                    "complementary_half" => Masking::ComplementaryHalf,
                    _ => return Err(format!("{key}: expected full or complementary_half, got {value:?}")),
                }
            }
            "decode.k" => d.k = optional(key, value, "integer")?,
            "decode.temperature" => d.temperature = parse(key, value, "number")?,
            "decode.max_new_tokens" => d.max_new_tokens = parse(key, value, "integer")?,
            "decode.seed" => d.seed = parse(key, value, "integer")?,
            "decode.eos" => d.eos = optional(key, value, "token id")?,
            "data.kind" => {
                data.kind = match value {
                    "deterministic" => DataKind::Deterministic,
                    "markov" => DataKind::Markov,
                    "bytes" => DataKind::Bytes,
                    "file" => DataKind::File,
                    _ => return Err(format!("{key}: expected deterministic, markov, bytes or file, got {value:?}")),
                }
            }
            "data.pattern" => data.pattern = parse_list(key, value)?,
            "data.states" => data.states = parse(key, value, "integer")?,
            "data.dominant" => data.dominant = parse(key, value, "number")?,
            "data.tokens" => data.tokens = parse(key, value, "integer")?,
            "data.seed" => data.seed = parse(key, value, "integer")?,
            "data.path" => data.path = Some(value.to_string()),
            "bench.k_values" => self.bench.k_values = parse_list(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parse config text. `origin` names the source in diagnostics.
    pub fn parse_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let at = |message: String| ConfigError {
                origin: format!("{origin}:{line_no}"),
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(format!("expected key=value, got {line:?}")));
            };
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(at(format!("{key} already set on line {prev}")));
            }
            cfg.set(key, value).map_err(at)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: origin.clone(),
            message: format!("cannot read config file: {e}"),
        })?;
        Self::parse_text(&text, &origin)
    }

    /// Apply `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let err = |message: String| ConfigError {
                origin: format!("--set {o}"),
                message,
            };
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| err("expected key=value".into()))?;
            self.set(k.trim(), v).map_err(err)?;
        }
        Ok(())
    }

    /// One seed for every random stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.decode.seed = seed;
        self.data.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |e: orthrus_core::OrthrusError| ConfigError {
            origin: "config".into(),
            message: e.to_string(),
        };
        self.model.validate().map_err(err)?;
        self.train.validate().map_err(err)?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}
