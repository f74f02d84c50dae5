//! Run configuration: defaults, `key = value` files and conversion into
//! protocol and network settings.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::resnet::{BlockKind, NetworkConfig, ResnetError, STANDARD_WIDTHS};
use crate::trainer::{LrFindConfig, LrSpec, PhaseConfig, ProtocolConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown setting `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub variant: u32,
    pub k: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs_head: usize,
    pub epochs_finetune: usize,
    pub lr_lo: f64,
    pub lr_hi: f64,
    /// Phase-1 rate; `None` runs a learning-rate sweep on the first fold.
    pub lr_head: Option<f64>,
    pub oversample: bool,
    pub augment: bool,
    pub precision: Precision,
    pub init_checkpoint: Option<PathBuf>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub resolution: usize,
    /// Custom per-stage block counts; overrides the named variant.
    pub blocks: Option<[usize; 4]>,
    pub widths: Option<[usize; 4]>,
    pub block: Option<BlockKind>,
    pub lr_find_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            variant: 50,
            k: 5,
            seed: 0,
            batch_size: 64,
            epochs_head: 8,
            epochs_finetune: 3,
            lr_lo: 1e-6,
            lr_hi: 1e-4,
            lr_head: None,
            oversample: false,
            augment: false,
            precision: Precision::F32,
            init_checkpoint: None,
            momentum: 0.9,
            weight_decay: 0.0,
            threshold: 0.5,
            resolution: 224,
            blocks: None,
            widths: None,
            block: None,
            lr_find_iterations: 100,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

fn parse_quad(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse::<usize>(key, p.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn optional(value: &str) -> Option<&str> {
    (!value.is_empty() && value != "none" && value != "auto").then_some(value)
}

impl RunConfig {
    /// Applies one setting. Keys may use `-` or `_` between words.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let norm = key.trim().replace('-', "_");
        let v = value.trim();
        match norm.as_str() {
            "manifest" => self.manifest = optional(v).map(PathBuf::from),
            "variant" => self.variant = parse(&norm, v)?,
            "k" => self.k = parse(&norm, v)?,
            "seed" => self.seed = parse(&norm, v)?,
            "batch_size" => self.batch_size = parse(&norm, v)?,
            "epochs_head" => self.epochs_head = parse(&norm, v)?,
            "epochs_finetune" => self.epochs_finetune = parse(&norm, v)?,
            "lr_lo" => self.lr_lo = parse(&norm, v)?,
            "lr_hi" => self.lr_hi = parse(&norm, v)?,
            "lr_head" => self.lr_head = optional(v).map(|v| parse(&norm, v)).transpose()?,
            "oversample" => self.oversample = parse_bool(&norm, v)?,
            "augment" => self.augment = parse_bool(&norm, v)?,
            "precision" => {
                self.precision = match v {
                    "32" => Precision::F32,
                    "64" => Precision::F64,
                    _ => {
                        return Err(ConfigError::Value {
                            key: norm,
                            value: v.into(),
                        })
                    }
                }
            }
            "init_checkpoint" => self.init_checkpoint = optional(v).map(PathBuf::from),
            "momentum" => self.momentum = parse(&norm, v)?,
            "weight_decay" => self.weight_decay = parse(&norm, v)?,
            "threshold" => self.threshold = parse(&norm, v)?,
            "resolution" => self.resolution = parse(&norm, v)?,
            "blocks" => self.blocks = optional(v).map(|v| parse_quad(&norm, v)).transpose()?,
            "widths" => self.widths = optional(v).map(|v| parse_quad(&norm, v)).transpose()?,
            "block" => {
                self.block = match optional(v) {
                    None => None,
                    Some("basic") => Some(BlockKind::Basic),
                    Some("bottleneck") => Some(BlockKind::Bottleneck),
                    Some(_) => {
                        return Err(ConfigError::Value {
                            key: norm,
                            value: v.into(),
                        })
                    }
                }
            }
            "lr_find_iterations" => self.lr_find_iterations = parse(&norm, v)?,
            _ => return Err(ConfigError::UnknownKey(key.trim().to_string())),
        }
        Ok(())
    }

    /// Reads `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(key, value).map_err(|e| match e {
                ConfigError::Value { .. } | ConfigError::UnknownKey(_) => ConfigError::Syntax {
                    line: i + 1,
                    message: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        };
        let quad = |q: &Option<[usize; 4]>| {
            q.map_or_else(
                || "none".to_string(),
                |q| q.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            )
        };
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("manifest", path(&self.manifest));
        line("variant", self.variant.to_string());
        line("k", self.k.to_string());
        line("seed", self.seed.to_string());
        line("batch-size", self.batch_size.to_string());
        line("epochs-head", self.epochs_head.to_string());
        line("epochs-finetune", self.epochs_finetune.to_string());
        line("lr-lo", format!("{:e}", self.lr_lo));
        line("lr-hi", format!("{:e}", self.lr_hi));
        line(
            "lr-head",
            self.lr_head.map_or_else(|| "auto".to_string(), |v| format!("{v:e}")),
        );
        line("oversample", self.oversample.to_string());
        line("augment", self.augment.to_string());
        line(
            "precision",
            match self.precision {
                Precision::F32 => "32".into(),
                Precision::F64 => "64".into(),
            },
        );
        line("init-checkpoint", path(&self.init_checkpoint));
        line("momentum", self.momentum.to_string());
        line("weight-decay", self.weight_decay.to_string());
        line("threshold", self.threshold.to_string());
        line("resolution", self.resolution.to_string());
        line("blocks", quad(&self.blocks));
        line("widths", quad(&self.widths));
        line(
            "block",
            match self.block {
                None => "none".into(),
                Some(BlockKind::Basic) => "basic".into(),
                Some(BlockKind::Bottleneck) => "bottleneck".into(),
            },
        );
        line("lr-find-iterations", self.lr_find_iterations.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(ConfigError::Invalid(format!("k must be at least 2, got {}", self.k)));
        }
        if self.batch_size == 0 || self.epochs_head == 0 {
            return Err(ConfigError::Invalid(
                "batch size and head epochs must be positive".into(),
            ));
        }
        if !(self.lr_lo > 0.0 && self.lr_hi >= self.lr_lo) {
            return Err(ConfigError::Invalid(format!(
                "learning-rate range needs 0 < lr-lo ≤ lr-hi, got [{}, {}]",
                self.lr_lo, self.lr_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Invalid("threshold must lie in [0, 1]".into()));
        }
        self.network_config(2)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// The network layout: a named variant, or a custom layout when
    /// `blocks` or `widths` is set.
    pub fn network_config(&self, num_classes: usize) -> Result<NetworkConfig, ResnetError> {
        if self.blocks.is_none() && self.widths.is_none() && self.block.is_none() {
            return NetworkConfig::variant(self.variant, num_classes)?.with_resolution(self.resolution);
        }
        let base = NetworkConfig::variant(self.variant, num_classes)?;
        NetworkConfig::custom(
            self.block.unwrap_or(base.block),
            self.blocks.unwrap_or(base.stage_blocks),
            self.widths.unwrap_or(STANDARD_WIDTHS),
            num_classes,
            self.resolution,
        )
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let head_lr = self.lr_head.map_or(LrSpec::Find, LrSpec::Single);
        let phase1 = PhaseConfig {
            batch_size: self.batch_size,
            epochs: self.epochs_head,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            oversample: self.oversample,
            augment: self.augment,
            ..PhaseConfig::head(head_lr, self.seed)
        };
        let phase2 = PhaseConfig {
            epochs: self.epochs_finetune,
            freeze: crate::resnet::FreezePolicy::All,
            lr: LrSpec::Range {
                lo: self.lr_lo,
                hi: self.lr_hi,
            },
            ..phase1
        };
        ProtocolConfig {
            phase1,
            phase2,
            lr_find: LrFindConfig {
                iterations: self.lr_find_iterations,
                ..LrFindConfig::default()
            },
            threshold: self.threshold,
        }
    }
}
