//! Run configuration: line-based `key = value` with `#` comments.

use std::path::Path;

use crate::aggregation::{DEFAULT_DET_THRESHOLD, DEFAULT_GAMMA, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::eval::{Attenuation, Pooling, ScoringOptions};
use crate::io::read_to_string;
use crate::trainer::{HeadKind, TrainConfig};

pub const DEFAULT_ALPHA: f64 = 50.0;

/// How the crystal head's scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaPolicy {
    Fixed(f64),
    /// Trainable, starting from the lower bound for p = 0.9.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadChoice {
    Softmax,
    Crystal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_drop_steps: Vec<usize>,
    pub lr_drop_factor: f64,
    pub max_iters: usize,
    pub max_grad_norm: Option<f64>,
    pub head: HeadChoice,
    pub alpha: AlphaPolicy,
    /// Hidden layer widths between the input and the embedding.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub pooling: Pooling,
    pub attenuate: bool,
    pub gamma: f64,
    pub det_threshold: f64,
    pub shift_scores: bool,
    pub open_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: train.seed,
            batch_size: train.batch_size,
            base_lr: train.base_lr,
            lr_drop_steps: train.lr_drop_steps,
            lr_drop_factor: train.lr_drop_factor,
            max_iters: train.max_iters,
            max_grad_norm: train.max_grad_norm,
            head: HeadChoice::Crystal,
            alpha: AlphaPolicy::Fixed(DEFAULT_ALPHA),
            hidden: vec![64, 64],
            embedding_dim: 32,
            pooling: Pooling::Quality(DEFAULT_LAMBDA),
            attenuate: false,
            gamma: DEFAULT_GAMMA,
            det_threshold: DEFAULT_DET_THRESHOLD,
            shift_scores: false,
            open_set: false,
        }
    }
}

fn value_err(key: &str, reason: impl Into<String>) -> Error {
    Error::ConfigValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| value_err(key, format!("`{v}` is not a valid number")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(value_err(key, "must be finite"));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(value_err(key, format!("`{v}` is not a boolean"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl RunConfig {
    /// Applies one setting, validating its range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "batch_size" => {
                self.batch_size = parse_num(key, v)?;
                if self.batch_size == 0 {
                    return Err(value_err(key, "must be at least 1"));
                }
            }
            "base_lr" => {
                self.base_lr = parse_f64(key, v)?;
                if self.base_lr <= 0.0 {
                    return Err(value_err(key, "must be positive"));
                }
            }
            "lr_drop_steps" => {
                self.lr_drop_steps = parse_list(key, v)?;
                if self.lr_drop_steps.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(value_err(key, "must be strictly increasing"));
                }
            }
            "lr_drop_factor" => {
                self.lr_drop_factor = parse_f64(key, v)?;
                if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
                    return Err(value_err(key, "must lie in (0, 1]"));
                }
            }
            "max_iters" => self.max_iters = parse_num(key, v)?,
            "max_grad_norm" => {
                self.max_grad_norm = if v == "none" {
                    None
                } else {
                    let c = parse_f64(key, v)?;
                    if c <= 0.0 {
                        return Err(value_err(key, "must be positive or `none`"));
                    }
                    Some(c)
                }
            }
            "head" => {
                self.head = match v {
                    "softmax" => HeadChoice::Softmax,
                    "crystal" => HeadChoice::Crystal,
                    _ => return Err(value_err(key, "expected `softmax` or `crystal`")),
                }
            }
            "alpha" => {
                self.alpha = if v == "auto" {
                    AlphaPolicy::Auto
                } else {
                    let a = parse_f64(key, v)?;
                    if a <= 0.0 {
                        return Err(value_err(key, "must be positive or `auto`"));
                    }
                    AlphaPolicy::Fixed(a)
                }
            }
            "hidden" => {
                self.hidden = parse_list(key, v)?;
                if self.hidden.contains(&0) {
                    return Err(value_err(key, "layer widths must be positive"));
                }
            }
            "embedding_dim" => {
                self.embedding_dim = parse_num(key, v)?;
                if self.embedding_dim == 0 {
                    return Err(value_err(key, "must be at least 1"));
                }
            }
            "lambda" => {
                let l = parse_f64(key, v)?;
                if l < 0.0 {
                    return Err(value_err(key, "must be non-negative"));
                }
                self.pooling = Pooling::Quality(l);
            }
            "pooling" => {
                self.pooling = match v {
                    "media_average" => Pooling::MediaAverage,
                    "quality" => match self.pooling {
                        Pooling::Quality(l) => Pooling::Quality(l),
                        Pooling::MediaAverage => Pooling::Quality(DEFAULT_LAMBDA),
                    },
                    _ => return Err(value_err(key, "expected `quality` or `media_average`")),
                }
            }
            "attenuate" => self.attenuate = parse_bool(key, v)?,
            "gamma" => {
                self.gamma = parse_f64(key, v)?;
                if self.gamma < 1.0 {
                    return Err(value_err(key, "must be at least 1"));
                }
            }
            "det_threshold" => {
                self.det_threshold = parse_f64(key, v)?;
                if !(self.det_threshold > 0.0 && self.det_threshold < 1.0) {
                    return Err(value_err(key, "must lie in (0, 1)"));
                }
            }
            "shift_scores" => self.shift_scores = parse_bool(key, v)?,
            "open_set" => self.open_set = parse_bool(key, v)?,
            _ => return Err(value_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedRow {
                line: i + 1,
                reason: format!("expected `key = value`, found `{line}`"),
            })?;
            config.set(key.trim(), value)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&read_to_string(path)?)
    }

    pub fn head_kind(&self) -> HeadKind {
        match (self.head, self.alpha) {
            (HeadChoice::Softmax, _) => HeadKind::Softmax,
            (HeadChoice::Crystal, AlphaPolicy::Fixed(a)) => HeadKind::CrystalFixed(a),
            (HeadChoice::Crystal, AlphaPolicy::Auto) => HeadKind::CrystalTrainable,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            lr_drop_steps: self.lr_drop_steps.clone(),
            lr_drop_factor: self.lr_drop_factor,
            max_iters: self.max_iters,
            seed: self.seed,
            head_kind: self.head_kind(),
            max_grad_norm: self.max_grad_norm,
        }
    }

    /// Layer widths from `input_dim` through the hidden layers to the embedding.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }

    pub fn scoring_options(&self) -> ScoringOptions {
        ScoringOptions {
            pooling: self.pooling,
            attenuation: self.attenuate.then_some(Attenuation {
                gamma: self.gamma,
                det_threshold: self.det_threshold,
            }),
            shift_scores: self.shift_scores,
        }
    }
}
