//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys are listed in [`KEYS`]; unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::normalize::NormMode;
use crate::data::sample::ScoreRange;
use crate::error::{AlopeError, Result};
use crate::eval::williams::Tails;
use crate::heads::StrategyKind;
use crate::transformer::{parse_layer_list, Projection, TransformerConfig};
use crate::train::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ALOPE_CONFIG";

pub const KEYS: &[(&str, &str)] = &[
    ("strategy", "vanilla | dynamic | multihead"),
    ("layers", "comma-separated layer indices, negative counts from the top"),
    ("loss_weights", "comma-separated multihead loss weights"),
    ("head_bias", "true | false"),
    ("epochs", "training epochs"),
    ("batch_size", "examples per step"),
    ("learning_rate", "optimizer step size"),
    ("weight_decay", "decoupled weight decay"),
    ("optimizer", "adamw | sgd"),
    ("seed", "single seed for every random choice"),
    ("grad_clip", "max gradient norm, or none"),
    ("eval_every", "validation interval in steps, 0 for per epoch"),
    ("max_steps", "cap on optimizer steps, or none"),
    ("frozen_backbone", "true trains heads only"),
    ("lora_rank", "adapter rank"),
    ("lora_scale", "adapter output scale"),
    ("lora_targets", "comma-separated projection names"),
    ("normalization", "none | minmax | zscore"),
    ("score_min", "lowest valid score"),
    ("score_max", "highest valid score"),
    ("n_layers", "transformer depth"),
    ("d_model", "hidden width"),
    ("n_heads", "attention heads"),
    ("d_ff", "feed-forward width"),
    ("max_seq_len", "maximum tokens per prompt"),
    ("activation", "silu | gelu"),
    ("tokenizer_vocab", "byte-pair vocabulary size, 258 to 4096"),
    ("prompt_template", "prompt text with the four placeholders, \\n for newlines"),
    ("alpha", "significance level"),
    ("tails", "one | two"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub model: TransformerConfig,
    pub tokenizer_vocab: usize,
    pub prompt_template: Option<String>,
    pub alpha: f64,
    pub tails: Tails,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            train: TrainConfig::default(),
            model: TransformerConfig::default(),
            tokenizer_vocab: 512,
            prompt_template: None,
            alpha: 0.05,
            tails: Tails::One,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| AlopeError::invalid(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(AlopeError::invalid(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.trim().eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl Settings {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "strategy" => t.strategy.strategy = value.parse::<StrategyKind>()?,
            "layers" => t.strategy.layers = parse_layer_list(value)?,
            "loss_weights" => {
                t.strategy.loss_weights = Some(
                    value
                        .split(',')
                        .map(|w| parse::<f64>(key, w))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "head_bias" => t.strategy.bias = parse_bool(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse()?,
            "seed" => t.seed = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse_optional(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "max_steps" => t.max_steps = parse_optional(key, value)?,
            "frozen_backbone" => t.frozen_backbone = parse_bool(key, value)?,
            "lora_rank" => t.lora.rank = parse(key, value)?,
            "lora_scale" => t.lora.scale = parse(key, value)?,
            "lora_targets" => {
                t.lora.targets = value
                    .split(',')
                    .map(|s| s.trim().parse::<Projection>())
                    .collect::<Result<Vec<_>>>()?
            }
            "normalization" => t.normalization = value.parse::<NormMode>()?,
            "score_min" => t.score_range = ScoreRange::new(parse(key, value)?, t.score_range.max)?,
            "score_max" => t.score_range = ScoreRange::new(t.score_range.min, parse(key, value)?)?,
            "n_layers" => self.model.n_layers = parse(key, value)?,
            "d_model" => self.model.d_model = parse(key, value)?,
            "n_heads" => self.model.n_heads = parse(key, value)?,
            "d_ff" => self.model.d_ff = parse(key, value)?,
            "max_seq_len" => self.model.max_seq_len = parse(key, value)?,
            "activation" => self.model.activation = value.parse()?,
            "tokenizer_vocab" => self.tokenizer_vocab = parse(key, value)?,
            "prompt_template" => self.prompt_template = Some(value.replace("\\n", "\n")),
            "alpha" => self.alpha = parse(key, value)?,
            "tails" => {
                self.tails = match value.trim() {
                    "one" => Tails::One,
                    "two" => Tails::Two,
                    other => return Err(AlopeError::invalid(format!("tails: expected one or two, got `{other}`"))),
                }
            }
            other => {
                let valid: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
                return Err(AlopeError::invalid(format!(
                    "unknown setting `{other}`; valid keys: {}",
                    valid.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Applies every line of a config file; errors carry the line number.
    pub fn apply_text(&mut self, text: &str, label: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| AlopeError::Parse {
                path: label.to_string(),
                line: i as u64 + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            self.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| AlopeError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }
}
