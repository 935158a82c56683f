//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. Keys that are absent keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::adapter::AdapterOptions;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::sim::data::SyntheticSpec;
use crate::train::{TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    /// Bank size `N`; also the number of warm-start profiles.
    pub n: usize,
    pub bottleneck: usize,
    pub bank_seed: u64,
    /// Per-profile training.
    pub train: TrainConfig,
    pub warm_epochs: usize,
    pub warm_lr: f64,
    /// Synthetic data; `data.classes` is also the head width.
    pub data: SyntheticSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: BackboneConfig {
                layers: 2,
                hidden: 32,
                heads: 2,
                vocab: 64,
                max_seq: 16,
                seed: 42,
            },
            n: 20,
            bottleneck: 8,
            bank_seed: 42,
            train: TrainConfig {
                epochs: 20,
                batch_size: 8,
                lr: 1e-2,
                train_head: false,
                ..Default::default()
            },
            warm_epochs: 20,
            warm_lr: 5e-3,
            data: SyntheticSpec {
                seq_len: 8,
                active_vocab: 12,
                permutations: 1,
                ..Default::default()
            },
        }
    }
}

pub const KEYS: &[&str] = &[
    "layers",
    "hidden",
    "heads",
    "vocab",
    "max_seq",
    "backbone_seed",
    "n",
    "bottleneck",
    "bank_seed",
    "mode",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "k",
    "tau",
    "nu",
    "mask_variant",
    "activation",
    "residual",
    "train_head",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "warm_epochs",
    "warm_lr",
    "profiles",
    "classes",
    "samples",
    "seq_len",
    "active_vocab",
    "features",
    "perturbation",
    "noise",
    "permutations",
    "data_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value {value:?} for {key}: {e}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: Error| Error::config(format!("line {}: {e}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::config(format!("expected key = value, got {line:?}"))))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(at(Error::config(format!("duplicate key {key}"))));
            }
            cfg.set(key, value).map_err(at)?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (bb, t, d) = (&mut self.backbone, &mut self.train, &mut self.data);
        match key {
            "layers" => bb.layers = parse(key, value)?,
            "hidden" => bb.hidden = parse(key, value)?,
            "heads" => bb.heads = parse(key, value)?,
            "vocab" => bb.vocab = parse(key, value)?,
            "max_seq" => bb.max_seq = parse(key, value)?,
            "backbone_seed" => bb.seed = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "bottleneck" => self.bottleneck = parse(key, value)?,
            "bank_seed" => self.bank_seed = parse(key, value)?,
            "mode" => t.mode = value.parse()?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "k" => t.k = if value == "none" { None } else { Some(parse(key, value)?) },
            "tau" => t.tau = parse(key, value)?,
            "nu" => t.nu = parse(key, value)?,
            "mask_variant" => t.mask_variant = value.parse()?,
            "activation" => t.activation = value.parse()?,
            "residual" => t.residual = parse(key, value)?,
            "train_head" => t.train_head = parse(key, value)?,
            "beta1" => t.adamw.beta1 = parse(key, value)?,
            "beta2" => t.adamw.beta2 = parse(key, value)?,
            "adam_eps" => t.adamw.eps = parse(key, value)?,
            "weight_decay" => t.adamw.weight_decay = parse(key, value)?,
            "warm_epochs" => self.warm_epochs = parse(key, value)?,
            "warm_lr" => self.warm_lr = parse(key, value)?,
            "profiles" => d.profiles = parse(key, value)?,
            "classes" => d.classes = parse(key, value)?,
            "samples" => d.samples = parse(key, value)?,
            "seq_len" => d.seq_len = parse(key, value)?,
            "active_vocab" => d.active_vocab = parse(key, value)?,
            "features" => d.features = parse(key, value)?,
            "perturbation" => d.perturbation = parse(key, value)?,
            "noise" => d.noise = parse(key, value)?,
            "permutations" => d.permutations = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.backbone.hidden {
            return Err(Error::config(format!(
                "bottleneck must lie in 1..{} (hidden size)",
                self.backbone.hidden
            )));
        }
        if let Some(k) = self.train.k {
            if k == 0 || k > self.n {
                return Err(Error::config(format!("k = {k} must lie in 1..={}", self.n)));
            }
        }
        if self.data.active_vocab > self.backbone.vocab {
            return Err(Error::config("active_vocab exceeds the backbone vocabulary"));
        }
        if self.data.seq_len > self.backbone.max_seq {
            return Err(Error::config("seq_len exceeds the backbone max_seq"));
        }
        if self.warm_epochs == 0 {
            return Err(Error::config("warm_epochs must be positive"));
        }
        Ok(())
    }

    pub fn adapter_options(&self) -> AdapterOptions {
        AdapterOptions {
            activation: self.train.activation,
            residual: self.train.residual,
            ..Default::default()
        }
    }

    /// Training settings of the warm start.
    pub fn warm_train(&self) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::SingleAdapter,
            k: None,
            mask_variant: Default::default(),
            epochs: self.warm_epochs,
            lr: self.warm_lr,
            ..self.train.clone()
        }
    }

    /// Every key, in [`KEYS`] order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (bb, t, d) = (&self.backbone, &self.train, &self.data);
        let values: Vec<String> = vec![
            bb.layers.to_string(),
            bb.hidden.to_string(),
            bb.heads.to_string(),
            bb.vocab.to_string(),
            bb.max_seq.to_string(),
            bb.seed.to_string(),
            self.n.to_string(),
            self.bottleneck.to_string(),
            self.bank_seed.to_string(),
            t.mode.as_str().to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.seed.to_string(),
            t.k.map_or("none".to_string(), |k| k.to_string()),
            t.tau.to_string(),
            t.nu.to_string(),
            t.mask_variant.as_str().to_string(),
            t.activation.as_str().to_string(),
            t.residual.to_string(),
            t.train_head.to_string(),
            t.adamw.beta1.to_string(),
            t.adamw.beta2.to_string(),
            t.adamw.eps.to_string(),
            t.adamw.weight_decay.to_string(),
            self.warm_epochs.to_string(),
            self.warm_lr.to_string(),
            d.profiles.to_string(),
            d.classes.to_string(),
            d.samples.to_string(),
            d.seq_len.to_string(),
            d.active_vocab.to_string(),
            d.features.to_string(),
            d.perturbation.to_string(),
            d.noise.to_string(),
            d.permutations.to_string(),
            d.seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}
