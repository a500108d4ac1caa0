//! Model and training hyperparameters, read from and written to flat
//! `key = value` text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};

/// Which consistency loss to use between the two views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CarlForm {
    /// `-mean_i log Σ_j a_ij b_ij`: minimized by matching confident assignments.
    Agreement,
    /// `-mean_i Σ_j log(a_ij b_ij)`.
    Literal,
}

impl FromStr for CarlForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agreement" => Ok(CarlForm::Agreement),
            "literal" => Ok(CarlForm::Literal),
            _ => Err(Error::Config(format!("unknown carl form {s:?} (agreement|literal)"))),
        }
    }
}

impl std::fmt::Display for CarlForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CarlForm::Agreement => "agreement",
            CarlForm::Literal => "literal",
        })
    }
}

/// Multipliers on the five loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub cluster: f32,
    pub discrim: f32,
    pub p_discrim: f32,
    pub contrast: f32,
    pub carl: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cluster: 1.0,
            discrim: 1.0,
            p_discrim: 1.0,
            contrast: 1.0,
            carl: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub dim: usize,
    pub tau1: f32,
    pub tau2: f32,
    pub tau_c: f32,
    pub alpha: f64,
    pub n_prototypes: usize,
    pub per_class: usize,
    pub background: bool,
    /// Background prototypes; `None` means `3·classes`.
    pub n_background: Option<usize>,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means `4·dim`.
    pub d_ff: Option<usize>,
    pub dropout: f32,
    pub carl: CarlForm,
    pub weights: LossWeights,
}

impl ModelConfig {
    pub fn new(classes: usize, dim: usize) -> Self {
        ModelConfig {
            classes,
            dim,
            tau1: 0.1,
            tau2: 0.02,
            tau_c: 0.02,
            alpha: 0.1,
            n_prototypes: 5,
            per_class: 3,
            background: true,
            n_background: None,
            layers: 2,
            heads: 8,
            d_ff: None,
            dropout: 0.0,
            carl: CarlForm::Agreement,
            weights: LossWeights::default(),
        }
    }

    pub fn background_prototypes(&self) -> usize {
        if self.background {
            self.n_background.unwrap_or(3 * self.classes)
        } else {
            0
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.dim,
            d_ff: self.d_ff.unwrap_or(4 * self.dim),
            dropout: self.dropout,
        }
    }

    /// Number of label columns (foreground plus background when enabled).
    pub fn labels(&self) -> usize {
        self.classes + usize::from(self.background_prototypes() > 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("classes must be at least 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau_c", self.tau_c)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if self.n_prototypes == 0 {
            return Err(Error::Config("n_prototypes must be at least 1".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        self.decoder().validate()
    }

    fn write_keys(&self, out: &mut String) {
        let w = &self.weights;
        let n_bg = self.n_background.map_or("auto".to_string(), |n| n.to_string());
        let d_ff = self.d_ff.map_or("auto".to_string(), |n| n.to_string());
        for (k, v) in [
            ("classes", self.classes.to_string()),
            ("dim", self.dim.to_string()),
            ("tau1", self.tau1.to_string()),
            ("tau2", self.tau2.to_string()),
            ("tau_c", self.tau_c.to_string()),
            ("alpha", self.alpha.to_string()),
            ("n_prototypes", self.n_prototypes.to_string()),
            ("per_class", self.per_class.to_string()),
            ("background", self.background.to_string()),
            ("n_background", n_bg),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", d_ff),
            ("dropout", self.dropout.to_string()),
            ("carl", self.carl.to_string()),
            ("weight_cluster", w.cluster.to_string()),
            ("weight_discrim", w.discrim.to_string()),
            ("weight_p_discrim", w.p_discrim.to_string()),
            ("weight_contrast", w.contrast.to_string()),
            ("weight_carl", w.carl.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "classes" => self.classes = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "tau1" => self.tau1 = parse(key, value)?,
            "tau2" => self.tau2 = parse(key, value)?,
            "tau_c" => self.tau_c = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "n_prototypes" => self.n_prototypes = parse(key, value)?,
            "per_class" => self.per_class = parse(key, value)?,
            "background" => self.background = parse(key, value)?,
            "n_background" => self.n_background = parse_auto(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse_auto(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "carl" => self.carl = value.parse()?,
            "weight_cluster" => self.weights.cluster = parse(key, value)?,
            "weight_discrim" => self.weights.discrim = parse(key, value)?,
            "weight_p_discrim" => self.weights.p_discrim = parse(key, value)?,
            "weight_contrast" => self.weights.contrast = parse(key, value)?,
            "weight_carl" => self.weights.carl = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub warmup_fraction: f64,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    /// Worker threads for per-image forward/backward; 1 is bitwise reproducible.
    pub threads: usize,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            base_lr: 5e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.04,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            threads: 1,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.model.validate()
    }

    /// Serializes every key, one `key = value` per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        self.model.write_keys(&mut out);
        out
    }

    /// Parses `text` on top of the defaults for `classes`×`dim`. Keys not
    /// present keep their defaults; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = TrainConfig::new(ModelConfig::new(1, 2));
        cfg.apply_pairs(&pairs)?;
        Ok(cfg)
    }

    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => {
                if !self.model.apply(key, value)? {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
    }
    Ok(out)
}
