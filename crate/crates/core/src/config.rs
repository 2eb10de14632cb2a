//! Flat `key = value` configuration with `#` comments.
//!
//! Precedence is defaults < file < command-line overrides, all funneled
//! through [`Config::set`] so every source obeys the same key list and
//! value validation. The fully resolved configuration is echoed into every
//! artifact a run produces, and the echo re-parses to the same values.

use crate::error::{Error, Result};

/// Network topology knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub dense_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub num_classes: usize,
    pub kernel_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 32,
            input_channels: 1,
            stem_channels: 16,
            dense_blocks: 2,
            layers_per_block: 4,
            growth_rate: 8,
            num_classes: 5,
            kernel_size: 3,
        }
    }
}

impl NetworkConfig {
    /// Rejects topologies that cannot be built, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("key `input_size`: must be at least 1"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("key `input_channels`: must be at least 1"));
        }
        if self.stem_channels == 0 {
            return Err(Error::config("key `stem_channels`: must be at least 1"));
        }
        if self.growth_rate == 0 {
            return Err(Error::config("key `growth_rate`: must be at least 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("key `num_classes`: must be at least 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "key `kernel_size`: must be odd, got {}",
                self.kernel_size
            )));
        }
        let mut size = self.input_size;
        let mut channels = self.stem_channels;
        for _ in 0..self.dense_blocks {
            if size % 2 != 0 {
                return Err(Error::config(format!(
                    "key `input_size`: {} is not divisible by 2^dense_blocks",
                    self.input_size
                )));
            }
            channels = (channels + self.layers_per_block * self.growth_rate) / 2;
            if channels == 0 {
                return Err(Error::config(
                    "key `stem_channels`: too few channels survive the transitions",
                ));
            }
            size /= 2;
        }
        Ok(())
    }
}

/// Loss combination coefficients and the Huber corner.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_dir: f64,
    pub lambda_orth: f64,
    pub lambda_unc: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dir: 0.2,
            lambda_orth: 5e-3,
            lambda_unc: 0.05,
            huber_delta: 1.0,
        }
    }
}

/// Optimization and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub tau: f64,
    pub seed: u64,
    pub strategy: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 16,
            epochs: 30,
            base_lr: 3e-4,
            weight_decay: 1e-5,
            t_max: 100,
            clip_norm: 0.0,
            tau: 0.4,
            seed: 42,
            strategy: "u-mask".to_string(),
        }
    }
}

/// Complete training-side configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub train: TrainSettings,
}

pub const STRATEGY_NAMES: [&str; 4] = ["u-mask", "u-zero", "u-one", "u-ignore"];

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key `{key}`: expected non-negative integer, got `{value}`")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key `{key}`: expected unsigned integer, got `{value}`")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key `{key}`: expected number, got `{value}`")))
}

fn split_line(line: &str) -> Option<(&str, &str)> {
    let uncommented = match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let trimmed = uncommented.trim();
    if trimmed.is_empty() {
        return None;
    }
    Some(match trimmed.split_once('=') {
        Some((k, v)) => (k.trim(), v.trim()),
        None => (trimmed, ""),
    })
}

impl Config {
    /// Assigns one key; both file lines and CLI overrides go through here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_size" => self.network.input_size = parse_usize(key, value)?,
            "input_channels" => self.network.input_channels = parse_usize(key, value)?,
            "stem_channels" => self.network.stem_channels = parse_usize(key, value)?,
            "dense_blocks" => self.network.dense_blocks = parse_usize(key, value)?,
            "layers_per_block" => self.network.layers_per_block = parse_usize(key, value)?,
            "growth_rate" => self.network.growth_rate = parse_usize(key, value)?,
            "num_classes" => self.network.num_classes = parse_usize(key, value)?,
            "kernel_size" => self.network.kernel_size = parse_usize(key, value)?,
            "lambda_dir" => self.loss.lambda_dir = parse_f64(key, value)?,
            "lambda_orth" => self.loss.lambda_orth = parse_f64(key, value)?,
            "lambda_unc" => self.loss.lambda_unc = parse_f64(key, value)?,
            "huber_delta" => self.loss.huber_delta = parse_f64(key, value)?,
            "batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "epochs" => self.train.epochs = parse_usize(key, value)?,
            "base_lr" => self.train.base_lr = parse_f64(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_f64(key, value)?,
            "t_max" => self.train.t_max = parse_usize(key, value)?,
            "clip_norm" => self.train.clip_norm = parse_f64(key, value)?,
            "tau" => self.train.tau = parse_f64(key, value)?,
            "seed" => self.train.seed = parse_u64(key, value)?,
            "strategy" => self.train.strategy = value.to_string(),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a whole file's text over the defaults.
    pub fn from_text(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` onto `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            if let Some((key, value)) = split_line(line) {
                self.set(key, value).map_err(|e| match e {
                    Error::Config(msg) => Error::config(format!("line {}: {msg}", lineno + 1)),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    /// Rejects structurally impossible settings, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let w = &self.loss;
        for (key, v) in [
            ("lambda_dir", w.lambda_dir),
            ("lambda_orth", w.lambda_orth),
            ("lambda_unc", w.lambda_unc),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "key `{key}`: must be a non-negative number, got {v}"
                )));
            }
        }
        if !w.huber_delta.is_finite() || w.huber_delta <= 0.0 {
            return Err(Error::config(format!(
                "key `huber_delta`: must be positive, got {}",
                w.huber_delta
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("key `batch_size`: must be at least 1"));
        }
        if t.t_max == 0 {
            return Err(Error::config("key `t_max`: must be at least 1"));
        }
        if !t.base_lr.is_finite() || t.base_lr < 0.0 {
            return Err(Error::config(format!(
                "key `base_lr`: must be a non-negative number, got {}",
                t.base_lr
            )));
        }
        if !t.weight_decay.is_finite() || t.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "key `weight_decay`: must be a non-negative number, got {}",
                t.weight_decay
            )));
        }
        if !t.clip_norm.is_finite() || t.clip_norm < 0.0 {
            return Err(Error::config(format!(
                "key `clip_norm`: must be a non-negative number, got {}",
                t.clip_norm
            )));
        }
        if !(t.tau > 0.0 && t.tau <= 1.0) {
            return Err(Error::config(format!(
                "key `tau`: must lie in (0, 1], got {}",
                t.tau
            )));
        }
        if !STRATEGY_NAMES.contains(&t.strategy.as_str()) {
            return Err(Error::config(format!(
                "key `strategy`: expected one of u-mask|u-zero|u-one|u-ignore, got `{}`",
                t.strategy
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn echo_pairs(&self) -> Vec<(&'static str, String)> {
        let n = &self.network;
        let w = &self.loss;
        let t = &self.train;
        vec![
            ("input_size", n.input_size.to_string()),
            ("input_channels", n.input_channels.to_string()),
            ("stem_channels", n.stem_channels.to_string()),
            ("dense_blocks", n.dense_blocks.to_string()),
            ("layers_per_block", n.layers_per_block.to_string()),
            ("growth_rate", n.growth_rate.to_string()),
            ("num_classes", n.num_classes.to_string()),
            ("kernel_size", n.kernel_size.to_string()),
            ("lambda_dir", w.lambda_dir.to_string()),
            ("lambda_orth", w.lambda_orth.to_string()),
            ("lambda_unc", w.lambda_unc.to_string()),
            ("huber_delta", w.huber_delta.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("t_max", t.t_max.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("tau", t.tau.to_string()),
            ("seed", t.seed.to_string()),
            ("strategy", t.strategy.clone()),
        ]
    }

    /// Text form of the resolved config; re-parses to an equal value.
    pub fn echo_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.echo_pairs() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// Synthetic-corpus generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub uncertain_frac: f64,
    pub seed: u64,
    prevalence_overrides: Vec<(usize, f64)>,
}

/// Fallback per-class positive rates, cycled when `classes` exceeds five.
/// Index 3 makes negatives rare for that class, mirroring a skewed corpus.
pub const DEFAULT_PREVALENCE: [f64; 5] = [0.45, 0.40, 0.35, 0.90, 0.30];

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            classes: 5,
            image_size: 32,
            uncertain_frac: 0.2,
            seed: 42,
            prevalence_overrides: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(index) = key.strip_prefix("prevalence_") {
            let i: usize = index
                .parse()
                .map_err(|_| Error::config(format!("unknown config key `{key}`")))?;
            let v = parse_f64(key, value)?;
            self.prevalence_overrides.retain(|&(j, _)| j != i);
            self.prevalence_overrides.push((i, v));
            return Ok(());
        }
        match key {
            "n" => self.n = parse_usize(key, value)?,
            "classes" => self.classes = parse_usize(key, value)?,
            "image_size" => self.image_size = parse_usize(key, value)?,
            "uncertain_frac" => self.uncertain_frac = parse_f64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            if let Some((key, value)) = split_line(line) {
                self.set(key, value).map_err(|e| match e {
                    Error::Config(msg) => Error::config(format!("line {}: {msg}", lineno + 1)),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("key `classes`: must be at least 1"));
        }
        if self.image_size < 8 {
            return Err(Error::config(format!(
                "key `image_size`: must be at least 8, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.uncertain_frac) {
            return Err(Error::config(format!(
                "key `uncertain_frac`: must lie in [0, 1], got {}",
                self.uncertain_frac
            )));
        }
        for &(i, v) in &self.prevalence_overrides {
            if i >= self.classes {
                return Err(Error::config(format!(
                    "key `prevalence_{i}`: class index out of range (classes = {})",
                    self.classes
                )));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!(
                    "key `prevalence_{i}`: must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Positive rate per class after applying overrides to the cycled defaults.
    pub fn prevalence(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.classes)
            .map(|c| DEFAULT_PREVALENCE[c % DEFAULT_PREVALENCE.len()])
            .collect();
        for &(i, v) in &self.prevalence_overrides {
            if i < out.len() {
                out[i] = v;
            }
        }
        out
    }

    pub fn echo_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = vec![
            ("n".to_string(), self.n.to_string()),
            ("classes".to_string(), self.classes.to_string()),
            ("image_size".to_string(), self.image_size.to_string()),
            (
                "uncertain_frac".to_string(),
                self.uncertain_frac.to_string(),
            ),
            ("seed".to_string(), self.seed.to_string()),
        ];
        for (c, p) in self.prevalence().into_iter().enumerate() {
            pairs.push((format!("prevalence_{c}"), p.to_string()));
        }
        pairs
    }

    pub fn echo_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.echo_pairs() {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
