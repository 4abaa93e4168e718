//! Flat `key = value` run configuration with layered overrides.
//!
//! Resolution order, later wins: built-in defaults, the config file, `KRLM_*`
//! environment variables, command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use krlm_core::backbone::BackboneConfig;
use krlm_core::encoder::EncoderConfig;
use krlm_core::evaluator::{Precision, Protocol};
use krlm_core::loss::BceSign;
use krlm_core::model::ModelConfig;
use krlm_core::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: String },
    #[error("{origin}: `{key}` expects {expected}, got `{value}`")]
    Type {
        key: String,
        value: String,
        expected: &'static str,
        origin: String,
    },
    #[error("{origin}: line {line} is not `key = value`")]
    Syntax { origin: String, line: usize },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

/// Everything a run needs besides its input and output paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunConfig {
    pub encoder_layers: usize,
    pub encoder_dim: usize,
    pub backbone_layers: usize,
    pub backbone_hidden: usize,
    /// 0 means four times the hidden width.
    pub backbone_ffn: usize,
    pub backbone_seed: u64,
    pub vocab_size: usize,
    pub vocab_items: usize,
    pub desc_tokens: usize,
    pub memory_k: usize,
    pub lambda: f64,
    pub negatives: usize,
    pub bce_sign: BceSign,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub accumulation: usize,
    pub batch_size: usize,
    /// `None` picks the mode's default.
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<u64>,
    pub max_steps: Option<u64>,
    pub valid_every: u64,
    pub valid_limit: usize,
    pub seed: u64,
    pub jobs: usize,
    pub protocol: Protocol,
    pub mode: Precision,
    pub template: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 6,
            encoder_dim: 64,
            backbone_layers: 2,
            backbone_hidden: 128,
            backbone_ffn: 0,
            backbone_seed: 1,
            vocab_size: 2048,
            vocab_items: 8,
            desc_tokens: 16,
            memory_k: 50,
            lambda: 0.5,
            negatives: 256,
            bce_sign: BceSign::Standard,
            lr: 5e-4,
            weight_decay: 0.01,
            warmup_fraction: 0.01,
            accumulation: 4,
            batch_size: 4,
            epochs: None,
            steps_per_epoch: None,
            max_steps: None,
            valid_every: 0,
            valid_limit: 100,
            seed: 0,
            jobs: 1,
            protocol: Protocol::Filtered,
            mode: Precision::F64,
            template: None,
        }
    }
}

/// Every accepted key with a one-line help text.
pub const KEYS: &[(&str, &str)] = &[
    ("encoder-layers", "message-passing layers S of every graph encoder"),
    ("encoder-dim", "hidden width d of the graph encoders"),
    ("backbone-layers", "transformer layers N of the frozen backbone"),
    ("backbone-hidden", "hidden width F of the backbone"),
    ("backbone-ffn", "feed-forward width of the backbone (0: 4F)"),
    ("backbone-seed", "seed of the frozen backbone weights"),
    ("vocab-size", "maximum tokenizer vocabulary"),
    ("vocab-items", "entities and relations listed in the instruction"),
    ("desc-tokens", "description tokens kept per listed item"),
    ("memory-k", "knowledge memory size K"),
    ("lambda", "weight of the distillation terms"),
    ("negatives", "negative samples per query"),
    ("bce-sign", "standard | as-printed"),
    ("lr", "AdamW learning rate"),
    ("weight-decay", "AdamW weight decay"),
    ("warmup-fraction", "fraction of updates spent in linear warmup"),
    ("accumulation", "micro-steps per optimizer update"),
    ("batch-size", "queries per step"),
    ("epochs", "training epochs (auto: per mode)"),
    ("steps-per-epoch", "steps per epoch (auto: one pass over the queries)"),
    ("max-steps", "hard cap on training steps (auto: none)"),
    ("valid-every", "validate every this many steps (0: at the end)"),
    ("valid-limit", "held-out triplets used for validation (0: all)"),
    ("seed", "seed of initialization and sampling"),
    ("jobs", "worker threads for per-query work"),
    ("protocol", "raw | filtered"),
    ("mode", "f64 | f32"),
    ("template", "instruction template file (auto: bundled)"),
];

/// Environment variable that overrides `key`.
pub fn env_var(key: &str) -> String {
    format!("KRLM_{}", key.to_uppercase().replace('-', "_"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str, origin: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Type {
        key: key.into(),
        value: value.into(),
        expected,
        origin: origin.into(),
    })
}

fn parse_opt<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
    origin: &str,
) -> Result<Option<T>, ConfigError> {
    if value.trim() == "auto" {
        Ok(None)
    } else {
        parse_num(key, value, expected, origin).map(Some)
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let mismatch = |expected| ConfigError::Type {
            key: key.into(),
            value: value.into(),
            expected,
            origin: origin.into(),
        };
        const UINT: &str = "a non-negative integer";
        const OPT: &str = "a non-negative integer or `auto`";
        const REAL: &str = "a number";
        match key {
            "encoder-layers" => self.encoder_layers = parse_num(key, v, UINT, origin)?,
            "encoder-dim" => self.encoder_dim = parse_num(key, v, UINT, origin)?,
            "backbone-layers" => self.backbone_layers = parse_num(key, v, UINT, origin)?,
            "backbone-hidden" => self.backbone_hidden = parse_num(key, v, UINT, origin)?,
            "backbone-ffn" => self.backbone_ffn = parse_num(key, v, UINT, origin)?,
            "backbone-seed" => self.backbone_seed = parse_num(key, v, UINT, origin)?,
            "vocab-size" => self.vocab_size = parse_num(key, v, UINT, origin)?,
            "vocab-items" => self.vocab_items = parse_num(key, v, UINT, origin)?,
            "desc-tokens" => self.desc_tokens = parse_num(key, v, UINT, origin)?,
            "memory-k" => self.memory_k = parse_num(key, v, UINT, origin)?,
            "lambda" => self.lambda = parse_num(key, v, REAL, origin)?,
            "negatives" => self.negatives = parse_num(key, v, UINT, origin)?,
            "bce-sign" => {
                self.bce_sign = match v {
                    "standard" => BceSign::Standard,
                    "as-printed" => BceSign::AsPrinted,
                    _ => return Err(mismatch("`standard` or `as-printed`")),
                }
            }
            "lr" => self.lr = parse_num(key, v, REAL, origin)?,
            "weight-decay" => self.weight_decay = parse_num(key, v, REAL, origin)?,
            "warmup-fraction" => self.warmup_fraction = parse_num(key, v, REAL, origin)?,
            "accumulation" => self.accumulation = parse_num(key, v, UINT, origin)?,
            "batch-size" => self.batch_size = parse_num(key, v, UINT, origin)?,
            "epochs" => self.epochs = parse_opt(key, v, OPT, origin)?,
            "steps-per-epoch" => self.steps_per_epoch = parse_opt(key, v, OPT, origin)?,
            "max-steps" => self.max_steps = parse_opt(key, v, OPT, origin)?,
            "valid-every" => self.valid_every = parse_num(key, v, UINT, origin)?,
            "valid-limit" => self.valid_limit = parse_num(key, v, UINT, origin)?,
            "seed" => self.seed = parse_num(key, v, UINT, origin)?,
            "jobs" => self.jobs = parse_num(key, v, UINT, origin)?,
            "protocol" => self.protocol = v.parse().map_err(|_| mismatch("`raw` or `filtered`"))?,
            "mode" => self.mode = v.parse().map_err(|_| mismatch("`f64` or `f32`"))?,
            "template" => self.template = (v != "auto").then(|| PathBuf::from(v)),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    origin: origin.into(),
                })
            }
        }
        Ok(())
    }

    /// Text form of `key`, as accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |v: Option<u64>| v.map_or("auto".to_string(), |x| x.to_string());
        Some(match key {
            "encoder-layers" => self.encoder_layers.to_string(),
            "encoder-dim" => self.encoder_dim.to_string(),
            "backbone-layers" => self.backbone_layers.to_string(),
            "backbone-hidden" => self.backbone_hidden.to_string(),
            "backbone-ffn" => self.backbone_ffn.to_string(),
            "backbone-seed" => self.backbone_seed.to_string(),
            "vocab-size" => self.vocab_size.to_string(),
            "vocab-items" => self.vocab_items.to_string(),
            "desc-tokens" => self.desc_tokens.to_string(),
            "memory-k" => self.memory_k.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "negatives" => self.negatives.to_string(),
            "bce-sign" => match self.bce_sign {
                BceSign::Standard => "standard".into(),
                BceSign::AsPrinted => "as-printed".into(),
            },
            "lr" => format!("{:?}", self.lr),
            "weight-decay" => format!("{:?}", self.weight_decay),
            "warmup-fraction" => format!("{:?}", self.warmup_fraction),
            "accumulation" => self.accumulation.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "epochs" => opt(self.epochs.map(|e| e as u64)),
            "steps-per-epoch" => opt(self.steps_per_epoch),
            "max-steps" => opt(self.max_steps),
            "valid-every" => self.valid_every.to_string(),
            "valid-limit" => self.valid_limit.to_string(),
            "seed" => self.seed.to_string(),
            "jobs" => self.jobs.to_string(),
            "protocol" => self.protocol.to_string(),
            "mode" => match self.mode {
                Precision::F64 => "f64".into(),
                Precision::F32 => "f32".into(),
            },
            "template" => self
                .template
                .as_ref()
                .map_or("auto".into(), |p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Config file text that reproduces this configuration.
    pub fn to_file_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                message: message.into(),
            })
        };
        for (key, v) in [
            ("encoder-layers", self.encoder_layers),
            ("encoder-dim", self.encoder_dim),
            ("backbone-layers", self.backbone_layers),
            ("backbone-hidden", self.backbone_hidden),
            ("negatives", self.negatives),
            ("accumulation", self.accumulation),
            ("batch-size", self.batch_size),
            ("jobs", self.jobs),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.vocab_items < 2 {
            return bad("vocab-items", "must be at least 2");
        }
        if self.vocab_size < 262 {
            return bad("vocab-size", "must cover the 262 special and byte tokens");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight-decay", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup-fraction", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        let mut backbone = BackboneConfig::new(self.backbone_layers, self.backbone_hidden, vocab, self.backbone_seed);
        if self.backbone_ffn > 0 {
            backbone.ffn = self.backbone_ffn;
        }
        ModelConfig {
            backbone,
            encoder: EncoderConfig {
                layers: self.encoder_layers,
                dim: self.encoder_dim,
            },
            memory_k: self.memory_k,
            vocab_items: self.vocab_items,
            desc_tokens: self.desc_tokens,
            seed: self.seed,
        }
    }

    /// Training settings; `default_epochs` applies when `epochs` is `auto`.
    pub fn train_config(&self, mode: TrainMode, default_epochs: usize) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: self.epochs.unwrap_or(default_epochs),
            steps_per_epoch: self.steps_per_epoch,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            negatives: self.negatives,
            lambda: self.lambda,
            bce_sign: self.bce_sign,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            accumulation: self.accumulation,
            seed: self.seed,
            valid_every: self.valid_every,
            valid_limit: self.valid_limit,
            precision: self.mode,
            jobs: self.jobs,
        }
    }
}

/// A resolved configuration and the warnings produced on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

impl fmt::Display for Resolved {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.config.to_file_text())
    }
}

/// Splits config file text into `(line, key, value)` entries. Blank lines and
/// `#` comments are skipped; `key = value` and `key value` are both accepted.
pub fn parse_file_entries(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => match line.split_once(char::is_whitespace) {
                Some((k, v)) => (k.trim(), v.trim()),
                None => {
                    return Err(ConfigError::Syntax {
                        origin: origin.into(),
                        line: i + 1,
                    })
                }
            },
        };
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                origin: origin.into(),
                line: i + 1,
            });
        }
        out.push((i + 1, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Resolves defaults, then `file` (path and text), then `overrides` in
/// order. Each override is `(key, value, origin)`.
pub fn parse_config(
    file: Option<(&Path, &str)>,
    overrides: &[(String, String, String)],
) -> Result<Resolved, ConfigError> {
    let mut config = RunConfig::default();
    let mut warnings = Vec::new();
    if let Some((path, text)) = file {
        let origin = path.display().to_string();
        let entries = parse_file_entries(text, &origin)?;
        for (i, (line, key, value)) in entries.iter().enumerate() {
            if let Some((later, _, _)) = entries[i + 1..].iter().find(|(_, k, _)| k == key) {
                warnings.push(format!(
                    "{origin}: `{key}` on line {line} is overridden by line {later}; the last value wins"
                ));
            }
            config.set(key, value, &format!("{origin}:{line}"))?;
        }
    }
    for (key, value, origin) in overrides {
        config.set(key, value, origin)?;
    }
    config.validate()?;
    Ok(Resolved { config, warnings })
}

/// Fine-tuning epochs per inductive benchmark split; every split trains on
/// all of its graph triplets each epoch.
pub fn finetune_epochs(dataset: &str) -> Option<usize> {
    let key: String = dataset
        .to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect();
    let key = key
        .trim_end_matches("ind")
        .replace("fb237", "fb")
        .replace("nell995", "nell")
        .replace("wn18rr", "wn");
    Some(match key.as_str() {
        "fbv1" | "fbv2" | "nellv1" | "nellv2" | "nellv4" | "wnv1" | "wnv4" => 3,
        "fbv3" | "fbv4" | "nellv3" | "wnv2" | "wnv3" => 5,
        "fb25" | "fb50" | "fb75" | "fb100" => 10,
        "nl0" | "nl100" => 3,
        "nl25" | "nl50" | "nl75" => 5,
        "wk25" | "wk50" | "wk75" | "wk100" => 10,
        _ => return None,
    })
}
