//! Training configuration and its `key = value` file form.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown or repeated keys are errors. [`TrainConfig::resolved`] writes
//! every key, so its output reproduces the configuration exactly.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StackSpec};

/// Every accepted key with a one-line description, in resolved order.
pub const KEYS: &[(&str, &str)] = &[
    ("layers", "number of transformer layers"),
    (
        "stack",
        "high-order layer placement, e.g. [None] or [H_2^{1},H_3^{2}]",
    ),
    ("mode", "higher-order score computation: full | shared"),
    ("dim", "token width"),
    ("heads", "attention heads per layer"),
    ("parts", "horizontal part stripes, each with its own head"),
    ("lrp", "LRP branches joined by +, or None"),
    (
        "prior_axis",
        "side the sharing prior multiplies: key | query",
    ),
    ("tie_vk", "reuse the key projection as the value projection"),
    (
        "deform_depthwise",
        "depthwise main kernel in the deformable branch",
    ),
    ("ffn_ratio", "feed-forward hidden width over token width"),
    ("height", "input image height"),
    ("width", "input image width"),
    ("ids_per_batch", "identities per batch (P)"),
    ("images_per_id", "images per identity (K), at least 2"),
    ("margin", "triplet margin"),
    ("lr", "initial learning rate of the cosine schedule"),
    ("momentum", "SGD momentum"),
    (
        "weight_decay",
        "L2 weight decay on non-normalization weights",
    ),
    ("steps", "total optimizer steps"),
    ("seed", "seed for initialization, sampling and augmentation"),
    ("flip", "random horizontal flip"),
    ("erase", "random erasing"),
    (
        "ckpt_every",
        "checkpoint interval in steps; 0 saves only the final step",
    ),
    (
        "data",
        "training image directory (optional; --data overrides)",
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub stack: String,
    /// Model fields other than `layers`, `stack` and `classes`.
    pub model: ModelConfig,
    pub ids_per_batch: usize,
    pub images_per_id: usize,
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub seed: u64,
    pub flip: bool,
    pub erase: bool,
    pub ckpt_every: u64,
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            layers: model.stack.layers,
            stack: model.stack.to_string(),
            model,
            ids_per_batch: 4,
            images_per_id: 4,
            margin: 0.3,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 2000,
            seed: 0,
            flip: true,
            erase: true,
            ckpt_every: 0,
            data: None,
        }
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::config(format!("{key} = {v:?} is not a valid number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key} = {v:?} is not a boolean"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        match key {
            "layers" => self.layers = parse_num(key, v)?,
            "stack" => self.stack = v.to_string(),
            "mode" => m.mode = v.parse()?,
            "dim" => m.dim = parse_num(key, v)?,
            "heads" => m.heads = parse_num(key, v)?,
            "parts" => m.parts = parse_num(key, v)?,
            "lrp" => m.lrp = v.parse()?,
            "prior_axis" => m.prior_axis = v.parse()?,
            "tie_vk" => m.tie_vk = parse_bool(key, v)?,
            "deform_depthwise" => m.deform_depthwise = parse_bool(key, v)?,
            "ffn_ratio" => m.ffn_ratio = parse_num(key, v)?,
            "height" => m.input.0 = parse_num(key, v)?,
            "width" => m.input.1 = parse_num(key, v)?,
            "ids_per_batch" => self.ids_per_batch = parse_num(key, v)?,
            "images_per_id" => self.images_per_id = parse_num(key, v)?,
            "margin" => self.margin = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "erase" => self.erase = parse_bool(key, v)?,
            "ckpt_every" => self.ckpt_every = parse_num(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overlaid with the settings in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::config(format!("line {}: {}", i + 1, strip_prefix(&e)));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::config("expected `key = value`")))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(at(Error::config(format!("key {k:?} repeated"))));
            }
            seen.push(k);
            cfg.set(k, v).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `(key, value)` overrides, then re-validate.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)
                .map_err(|e| Error::config(format!("--{k}: {}", strip_prefix(&e))))?;
        }
        self.validate()
    }

    pub fn stack_spec(&self) -> Result<StackSpec> {
        StackSpec::parse(&self.stack, self.layers).map_err(|e| Error::config(format!("stack: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.stack_spec()?;
        if self.images_per_id < 2 {
            return Err(Error::config(
                "images_per_id must be at least 2 so every anchor has a positive",
            ));
        }
        if self.ids_per_batch < 2 {
            return Err(Error::config(
                "ids_per_batch must be at least 2 so every anchor has a negative",
            ));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("margin must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        for (k, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{k} must be finite and non-negative"
                )));
            }
        }
        self.model_config(1)?.grid()?;
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.images_per_id
    }

    pub fn model_config(&self, classes: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            stack: self.stack_spec()?,
            classes,
            ..self.model.clone()
        })
    }

    fn value(&self, key: &str) -> String {
        let m = &self.model;
        match key {
            "layers" => self.layers.to_string(),
            "stack" => self
                .stack_spec()
                .map_or_else(|_| self.stack.clone(), |s| s.to_string()),
            "mode" => m.mode.to_string(),
            "dim" => m.dim.to_string(),
            "heads" => m.heads.to_string(),
            "parts" => m.parts.to_string(),
            "lrp" => m.lrp.to_string(),
            "prior_axis" => m.prior_axis.to_string(),
            "tie_vk" => m.tie_vk.to_string(),
            "deform_depthwise" => m.deform_depthwise.to_string(),
            "ffn_ratio" => m.ffn_ratio.to_string(),
            "height" => m.input.0.to_string(),
            "width" => m.input.1.to_string(),
            "ids_per_batch" => self.ids_per_batch.to_string(),
            "images_per_id" => self.images_per_id.to_string(),
            "margin" => self.margin.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "flip" => self.flip.to_string(),
            "erase" => self.erase.to_string(),
            "ckpt_every" => self.ckpt_every.to_string(),
            "data" => self
                .data
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => unreachable!("key table and accessor agree"),
        }
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn resolved(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.value(k)))
            .collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
