//! Model and training configuration with a flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use crate::{ModelError, Result};

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

named_enum!(EncoderMode { Local => "local", Global => "global" });
named_enum!(Pooling { First => "first", Sum => "sum", Mean => "mean", Max => "max" });
named_enum!(ModulationMethod {
    None => "none",
    Docstring => "docstring",
    Film => "film",
    CrossAttention => "cross-attention",
});
named_enum!(MilLocality { Local => "local", Global => "global" });
named_enum!(MilAggregation { LogSumExp => "logsumexp", Max => "max", Mean => "mean" });
named_enum!(ModelKind {
    Transformer => "transformer",
    Lstm => "lstm",
    IpaGnn => "ipa-gnn",
    ExceptionIpaGnn => "exception-ipa-gnn",
    MilTransformer => "mil-transformer",
});

impl ModelKind {
    pub fn localizes(self) -> bool {
        matches!(self, ModelKind::ExceptionIpaGnn | ModelKind::MilTransformer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub pooling: Pooling,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: EncoderMode::Local,
            pooling: Pooling::First,
            layers: 1,
            heads: 2,
            embed_dim: 32,
            mlp_dim: 64,
            dropout: 0.0,
            attention_dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationConfig {
    pub method: ModulationMethod,
    pub heads: usize,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        ModulationConfig {
            method: ModulationMethod::None,
            heads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilConfig {
    pub locality: MilLocality,
    pub aggregation: MilAggregation,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            locality: MilLocality::Local,
            aggregation: MilAggregation::LogSumExp,
        }
    }
}

/// Everything needed to build and train a model. The MIL Transformer takes
/// its attention locality from `mil.locality`; `encoder.mode` is ignored for
/// it. The plain Transformer baseline always attends globally.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub modulation: ModulationConfig,
    pub encoder: EncoderConfig,
    pub hidden_size: usize,
    pub mil: MilConfig,
    /// Trip budget per enclosing loop in the step limit.
    pub loop_budget: usize,
    pub validate_every: usize,
    pub vocab_cap: usize,
    /// Restrict values to the published search grids.
    pub grid_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            clip_norm: 1.0,
            max_steps: 20_000,
            batch_size: 32,
            seed: 0,
            model_kind: ModelKind::ExceptionIpaGnn,
            modulation: ModulationConfig::default(),
            encoder: EncoderConfig::default(),
            hidden_size: 32,
            mil: MilConfig::default(),
            loop_budget: 2,
            validate_every: 500,
            vocab_cap: crate::vocab::DEFAULT_VOCAB_CAP,
            grid_mode: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "learning-rate",
    "clip-norm",
    "max-steps",
    "batch-size",
    "seed",
    "model-kind",
    "hidden-size",
    "modulation.method",
    "modulation.heads",
    "encoder.mode",
    "encoder.pooling",
    "encoder.layers",
    "encoder.heads",
    "encoder.embed-dim",
    "encoder.mlp-dim",
    "encoder.dropout",
    "encoder.attention-dropout",
    "mil.locality",
    "mil.aggregation",
    "loop-budget",
    "validate-every",
    "vocab-cap",
    "grid-mode",
];

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ModelError::Config {
        line,
        message: format!("{key}: {e}"),
    })
}

impl TrainConfig {
    /// Sets one key. `line` is only used for error messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "learning-rate" => self.learning_rate = parse_value(line, key, value)?,
            "clip-norm" => self.clip_norm = parse_value(line, key, value)?,
            "max-steps" => self.max_steps = parse_value(line, key, value)?,
            "batch-size" => self.batch_size = parse_value(line, key, value)?,
            "seed" => self.seed = parse_value(line, key, value)?,
            "model-kind" => self.model_kind = parse_value(line, key, value)?,
            "hidden-size" => self.hidden_size = parse_value(line, key, value)?,
            "modulation.method" => self.modulation.method = parse_value(line, key, value)?,
            "modulation.heads" => self.modulation.heads = parse_value(line, key, value)?,
            "encoder.mode" => self.encoder.mode = parse_value(line, key, value)?,
            "encoder.pooling" => self.encoder.pooling = parse_value(line, key, value)?,
            "encoder.layers" => self.encoder.layers = parse_value(line, key, value)?,
            "encoder.heads" => self.encoder.heads = parse_value(line, key, value)?,
            "encoder.embed-dim" => self.encoder.embed_dim = parse_value(line, key, value)?,
            "encoder.mlp-dim" => self.encoder.mlp_dim = parse_value(line, key, value)?,
            "encoder.dropout" => self.encoder.dropout = parse_value(line, key, value)?,
            "encoder.attention-dropout" => self.encoder.attention_dropout = parse_value(line, key, value)?,
            "mil.locality" => self.mil.locality = parse_value(line, key, value)?,
            "mil.aggregation" => self.mil.aggregation = parse_value(line, key, value)?,
            "loop-budget" => self.loop_budget = parse_value(line, key, value)?,
            "validate-every" => self.validate_every = parse_value(line, key, value)?,
            "vocab-cap" => self.vocab_cap = parse_value(line, key, value)?,
            "grid-mode" => self.grid_mode = parse_value(line, key, value)?,
            _ => {
                return Err(ModelError::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "learning-rate" => self.learning_rate.to_string(),
            "clip-norm" => self.clip_norm.to_string(),
            "max-steps" => self.max_steps.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "model-kind" => self.model_kind.to_string(),
            "hidden-size" => self.hidden_size.to_string(),
            "modulation.method" => self.modulation.method.to_string(),
            "modulation.heads" => self.modulation.heads.to_string(),
            "encoder.mode" => self.encoder.mode.to_string(),
            "encoder.pooling" => self.encoder.pooling.to_string(),
            "encoder.layers" => self.encoder.layers.to_string(),
            "encoder.heads" => self.encoder.heads.to_string(),
            "encoder.embed-dim" => self.encoder.embed_dim.to_string(),
            "encoder.mlp-dim" => self.encoder.mlp_dim.to_string(),
            "encoder.dropout" => self.encoder.dropout.to_string(),
            "encoder.attention-dropout" => self.encoder.attention_dropout.to_string(),
            "mil.locality" => self.mil.locality.to_string(),
            "mil.aggregation" => self.mil.aggregation.to_string(),
            "loop-budget" => self.loop_budget.to_string(),
            "validate-every" => self.validate_every.to_string(),
            "vocab-cap" => self.vocab_cap.to_string(),
            "grid-mode" => self.grid_mode.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ModelError::Config {
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.set(k.trim(), v.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config { line: 0, message: m });
        let e = &self.encoder;
        if e.heads == 0 || !e.embed_dim.is_multiple_of(e.heads) {
            return bad(format!("encoder.embed-dim {} not divisible by encoder.heads {}", e.embed_dim, e.heads));
        }
        if !(0.0..1.0).contains(&e.dropout) || !(0.0..1.0).contains(&e.attention_dropout) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if !(1..=2).contains(&self.modulation.heads) {
            return bad(format!("modulation.heads {} not in {{1, 2}}", self.modulation.heads));
        }
        if self.hidden_size == 0 || e.layers == 0 || e.mlp_dim == 0 || self.batch_size == 0 || self.loop_budget == 0 {
            return bad("sizes must be positive".into());
        }
        if self.validate_every == 0 {
            return bad("validate-every must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("learning-rate and clip-norm must be non-negative".into());
        }
        if self.modulation.method != ModulationMethod::None
            && !matches!(self.model_kind, ModelKind::IpaGnn | ModelKind::ExceptionIpaGnn)
            && self.modulation.method != ModulationMethod::Docstring
        {
            return bad(format!("{} modulation needs an IPA-GNN model", self.modulation.method));
        }
        if self.grid_mode {
            let in_grid = |x: f64, grid: &[f64]| grid.contains(&x);
            if !in_grid(self.learning_rate, &[0.01, 0.03, 0.1, 0.3]) {
                return bad(format!("learning-rate {} outside the grid", self.learning_rate));
            }
            if !in_grid(self.clip_norm, &[0.0, 0.5, 1.0, 2.0]) {
                return bad(format!("clip-norm {} outside the grid", self.clip_norm));
            }
            if ![64, 128, 256].contains(&self.hidden_size) {
                return bad(format!("hidden-size {} outside the grid", self.hidden_size));
            }
            if self.batch_size != 32 {
                return bad("batch-size must be 32 in grid mode".into());
            }
            if !in_grid(e.dropout, &[0.0, 0.1]) || !in_grid(e.attention_dropout, &[0.0, 0.1]) {
                return bad("dropout rates outside the grid".into());
            }
        }
        Ok(())
    }
}
