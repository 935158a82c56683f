//! Training loop, trainable-set selection and evaluation metrics.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::layer::Activation;
use crate::adapter::mask::{MaskSettings, MaskVariant};
use crate::autodiff::Tape;
use crate::codec::profile::MaskMode;
use crate::error::{Error, Result};
use crate::model::{head_logits, Model, Pass, Slot};
use crate::optim::{linear_decay, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One labelled token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    XPeftSoft,
    XPeftHard,
    SingleAdapter,
    HeadOnly,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::XPeftSoft => "x_peft_soft",
            TrainMode::XPeftHard => "x_peft_hard",
            TrainMode::SingleAdapter => "single_adapter",
            TrainMode::HeadOnly => "head_only",
        }
    }

    pub fn mask_mode(self) -> Option<MaskMode> {
        match self {
            TrainMode::XPeftSoft => Some(MaskMode::Soft),
            TrainMode::XPeftHard => Some(MaskMode::Hard),
            _ => None,
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "x_peft_soft" => TrainMode::XPeftSoft,
            "x_peft_hard" => TrainMode::XPeftHard,
            "single_adapter" => TrainMode::SingleAdapter,
            "head_only" => TrainMode::HeadOnly,
            other => {
                return Err(Error::config(format!(
                    "unknown mode {other:?} (expected x_peft_soft|x_peft_hard|single_adapter|head_only)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Only meaningful (and required) in hard mode.
    pub k: Option<usize>,
    pub tau: f64,
    pub nu: f64,
    pub mask_variant: MaskVariant,
    pub activation: Activation,
    pub residual: bool,
    /// Whether the head is optimised alongside the slot parameters.
    pub train_head: bool,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::XPeftSoft,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
            k: None,
            tau: 1.0,
            nu: 1.0,
            mask_variant: MaskVariant::TwoMasks,
            activation: Activation::Relu,
            residual: true,
            train_head: true,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.k) {
            (TrainMode::XPeftHard, None) => return Err(Error::config("x_peft_hard needs k")),
            (TrainMode::XPeftHard, Some(_)) => {}
            (m, Some(_)) => return Err(Error::config(format!("k only applies to x_peft_hard, not {}", m.as_str()))),
            _ => {}
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.mask_variant == MaskVariant::UpOnly && self.mode.mask_mode().is_none() {
            return Err(Error::config("mask_variant only applies to x_peft modes"));
        }
        Ok(())
    }

    /// Mask settings implied by an x_peft mode.
    pub fn mask_settings(&self) -> Option<MaskSettings> {
        let mode = self.mode.mask_mode()?;
        Some(MaskSettings {
            mode,
            k: self.k.unwrap_or(0),
            tau: self.tau,
            nu: self.nu,
            variant: self.mask_variant,
        })
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub mode: TrainMode,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub trainable_count: usize,
    pub wall_time: Duration,
}

impl RunLog {
    /// Mean training loss over the last epoch.
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }

    pub fn final_eval(&self) -> Option<Metrics> {
        self.epochs.last().and_then(|e| e.eval)
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            writeln!(out, "{i},{l}").expect("writing to a String");
        }
        out
    }

    /// Key/value summary. Wall time is left out so the file is reproducible.
    pub fn summary(&self) -> String {
        let mut out = String::from("{\n");
        writeln!(out, "  \"mode\": \"{}\",", self.mode.as_str()).unwrap();
        writeln!(out, "  \"steps\": {},", self.step_losses.len()).unwrap();
        writeln!(out, "  \"trainable_params\": {},", self.trainable_count).unwrap();
        writeln!(out, "  \"final_train_loss\": {},", json_num(self.final_train_loss())).unwrap();
        let epochs: Vec<String> = self
            .epochs
            .iter()
            .map(|e| {
                let eval = match e.eval {
                    Some(m) => format!(
                        ", \"accuracy\": {}, \"macro_f1\": {}",
                        json_num(m.accuracy),
                        json_num(m.macro_f1)
                    ),
                    None => String::new(),
                };
                format!("    {{\"epoch\": {}, \"mean_loss\": {}{eval}}}", e.epoch, json_num(e.mean_loss))
            })
            .collect();
        writeln!(out, "  \"epochs\": [\n{}\n  ]", epochs.join(",\n")).unwrap();
        out.push_str("}\n");
        out
    }
}

fn json_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".into()
    }
}

/// Sets `requires_grad` on exactly the parameters `mode` optimises. The
/// backbone and any bank are never touched: they are always frozen.
pub fn select_trainables<S: Scalar>(mode: TrainMode, model: &mut Model<S>, train_head: bool) -> Result<()> {
    let slot_ok = matches!(
        (mode, &model.slot),
        (TrainMode::XPeftSoft | TrainMode::XPeftHard, Slot::Masked { .. })
            | (TrainMode::SingleAdapter, Slot::Single(_))
            | (TrainMode::HeadOnly, _)
    );
    if !slot_ok {
        return Err(Error::config(format!("model slot does not support mode {}", mode.as_str())));
    }
    if let (Some(want), Slot::Masked { masks, .. }) = (mode.mask_mode(), &model.slot) {
        if masks.settings.mode != want {
            return Err(Error::config(format!(
                "mask tensors are {} but mode is {}",
                masks.settings.mode.as_str(),
                mode.as_str()
            )));
        }
    }
    let head_on = train_head || mode == TrainMode::HeadOnly;
    match &mut model.slot {
        Slot::Empty => {}
        Slot::Single(pairs) => {
            for p in pairs {
                p.down.requires_grad = mode == TrainMode::SingleAdapter;
                p.up.requires_grad = mode == TrainMode::SingleAdapter;
            }
        }
        Slot::Masked { masks, .. } => masks.set_trainable(mode.mask_mode().is_some()),
        Slot::Frozen { masks, .. } => {
            masks.ln_gamma.requires_grad = false;
            masks.ln_beta.requires_grad = false;
        }
    }
    model.head.set_trainable(head_on);
    Ok(())
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_labels(data: &[Example], classes: usize) -> Result<()> {
    for (i, e) in data.iter().enumerate() {
        if e.label >= classes {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: e.label,
                classes,
            });
        }
    }
    Ok(())
}

/// Optimises the parameters selected for `cfg.mode` and returns the log.
/// `eval` (if given) is scored after every epoch.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &[Example],
    eval: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    check_labels(data, model.head.classes())?;
    select_trainables(cfg.mode, model, cfg.train_head)?;
    let started = Instant::now();

    let cached = if cfg.mode == TrainMode::HeadOnly {
        Some(pooled_features(model, data)?)
    } else {
        None
    };

    let sizes: Vec<usize> = model.parameters().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(cfg.adamw, &sizes);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise = noise_rng(cfg.seed);
    let total = cfg.total_steps(data.len());
    let d = model.backbone.hidden();

    let mut log = RunLog {
        mode: cfg.mode,
        step_losses: Vec::with_capacity(total),
        epochs: Vec::with_capacity(cfg.epochs),
        trainable_count: model.trainable_count(),
        wall_time: Duration::ZERO,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let mut tape = Tape::new();
            let (logits, bound) = match &cached {
                Some(feats) => {
                    let rows: Vec<S> = chunk.iter().flat_map(|&i| feats[i * d..(i + 1) * d].iter().copied()).collect();
                    let x = tape.constant(vec![chunk.len(), d], rows)?;
                    let bound: Vec<_> = model.parameters().into_iter().map(|t| tape.leaf(t)).collect();
                    let n = bound.len();
                    (head_logits(&mut tape, x, bound[n - 2], bound[n - 1])?, bound)
                }
                None => {
                    let tokens: Vec<Vec<u32>> = chunk.iter().map(|&i| data[i].tokens.clone()).collect();
                    let f = model.forward(&mut tape, &tokens, Pass::Train(&mut noise))?;
                    (f.logits, f.bound)
                }
            };
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.item(loss).to_f64_exact();
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<S>>> = bound
                .iter()
                .map(|&v| if tape.requires_grad(v) { tape.grad(v).map(<[S]>::to_vec) } else { None })
                .collect();
            let lr = linear_decay(cfg.lr, step, total);
            opt.step(&mut model.parameters_mut(), &grads, lr);
            if model.parameters().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step });
            }
            log.step_losses.push(value);
            epoch_loss += value;
            batches += 1;
            step += 1;
        }
        let metrics = match eval {
            Some(ev) if !ev.is_empty() => Some(evaluate(model, ev)?),
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            eval: metrics,
        });
    }
    log.wall_time = started.elapsed();
    log::debug!(
        "{} finished {} steps in {:.2?}",
        cfg.mode.as_str(),
        log.step_losses.len(),
        log.wall_time
    );
    Ok(log)
}

const EVAL_BATCH: usize = 64;

/// Noise-free pooled features of every example, row-major `[n×d]`.
pub fn pooled_features<S: Scalar>(model: &Model<S>, data: &[Example]) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(data.len() * model.backbone.hidden());
    for chunk in data.chunks(EVAL_BATCH) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let mut tape = Tape::new();
        let (pooled, _) = model.features(&mut tape, &tokens, Pass::Eval)?;
        out.extend_from_slice(tape.value(pooled));
    }
    Ok(out)
}

pub fn predict_all<S: Scalar>(model: &Model<S>, data: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        out.extend(model.predict(&tokens)?);
    }
    Ok(out)
}

/// Accuracy and macro-F1 with noise-free mask selection.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &[Example]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::config("evaluation data is empty"));
    }
    let preds = predict_all(model, data)?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    Ok(metrics(&preds, &labels, model.head.classes()))
}

/// Macro-F1 averages over classes that occur in either labels or predictions.
pub fn metrics(preds: &[usize], labels: &[usize], classes: usize) -> Metrics {
    let n = labels.len().max(1) as f64;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count();
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count();
        if tp + fp + fn_ == 0 {
            continue;
        }
        present += 1;
        f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Metrics {
        accuracy: correct as f64 / n,
        macro_f1: if present == 0 { 0.0 } else { f1_sum / present as f64 },
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub k: usize,
    pub log: RunLog,
    pub eval: Option<Metrics>,
}

/// Trains one hard-mode model per `k` with the same seed. Values of `k`
/// above the bank size are skipped with a warning.
pub fn top_k_sweep<S: Scalar, F>(
    mut factory: F,
    n: usize,
    data: &[Example],
    eval: Option<&[Example]>,
    cfg: &TrainConfig,
    ks: &[usize],
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&TrainConfig) -> Result<Model<S>>,
{
    let mut rows = Vec::new();
    for &k in ks {
        if k == 0 || k > n {
            log::warn!("skipping k={k}: must be in 1..={n}");
            continue;
        }
        let run_cfg = TrainConfig {
            mode: TrainMode::XPeftHard,
            k: Some(k),
            ..cfg.clone()
        };
        let mut model = factory(&run_cfg)?;
        let log = train(&mut model, data, None, &run_cfg)?;
        let metrics = match eval {
            Some(ev) if !ev.is_empty() => Some(evaluate(&model, ev)?),
            _ => None,
        };
        rows.push(SweepRow { k, log, eval: metrics });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,final_train_loss,eval_accuracy,eval_macro_f1\n");
    for r in rows {
        let (acc, f1) = r
            .eval
            .map_or((String::new(), String::new()), |m| (m.accuracy.to_string(), m.macro_f1.to_string()));
        writeln!(out, "{},{},{},{}", r.k, r.log.final_train_loss(), acc, f1).unwrap();
    }
    out
}

/// Snapshot of every parameter tensor, for before/after comparisons.
pub fn snapshot<S: Scalar>(model: &Model<S>) -> Vec<Tensor<S>> {
    model.parameters().into_iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let labels = [0, 1, 1, 0, 2];
        let m = metrics(&labels, &labels, 3);
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        let labels = [0, 1, 0, 1];
        let m = metrics(&[0, 0, 0, 0], &labels, 2);
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn k_needed_only_in_hard_mode() {
        let mut cfg = TrainConfig {
            mode: TrainMode::XPeftHard,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.k = Some(2);
        cfg.validate().unwrap();
        cfg.mode = TrainMode::XPeftSoft;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn step_arithmetic() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        assert_eq!(cfg.total_steps(10), 9);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            TrainMode::XPeftSoft,
            TrainMode::XPeftHard,
            TrainMode::SingleAdapter,
            TrainMode::HeadOnly,
        ] {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
    }
}
