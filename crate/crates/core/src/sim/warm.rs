//! Warm start: the first `N` profiles each train their own adapter while
//! sharing one head; the adapters then become a frozen bank.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterBank, AdapterOptions, AdapterPair};
use crate::autodiff::Tape;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::model::{Head, Model, Pass, Slot};
use crate::optim::{linear_decay, AdamW};
use crate::scalar::Scalar;
use crate::sim::data::ProfileData;
use crate::train::{select_trainables, TrainConfig, TrainMode};

#[derive(Clone, Debug)]
pub struct WarmStart<S> {
    pub bank: AdapterBank<S>,
    pub head: Head<S>,
    /// Per-profile step losses, in training order.
    pub losses: Vec<Vec<f64>>,
}

/// Trains one adapter per profile against a shared head.
///
/// Steps interleave the profiles round-robin; each profile keeps its own
/// optimizer state and learning-rate schedule, and the head has its own.
/// Every adapter starts from the same `adapter_seed` draw.
pub fn warm_start<S: Scalar>(
    backbone: Arc<Backbone<S>>,
    profiles: &[ProfileData],
    b: usize,
    classes: usize,
    cfg: &TrainConfig,
    options: AdapterOptions,
) -> Result<WarmStart<S>> {
    if profiles.is_empty() {
        return Err(Error::config("warm start needs at least one profile"));
    }
    let cfg = TrainConfig {
        mode: TrainMode::SingleAdapter,
        k: None,
        train_head: true,
        ..cfg.clone()
    };
    cfg.validate()?;
    let head = Head::random(backbone.hidden(), classes, cfg.seed)?;
    let adapter_seed = cfg.seed.wrapping_add(1);
    let mut models = profiles
        .iter()
        .map(|p| {
            if p.train.is_empty() {
                return Err(Error::config(format!("profile {} has no training data", p.id)));
            }
            let mut m = Model::single_adapter(backbone.clone(), b, adapter_seed, head.clone(), options)?;
            select_trainables(TrainMode::SingleAdapter, &mut m, true)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut head = head;
    head.set_trainable(true);

    let slot_sizes: Vec<usize> = models[0].parameters().iter().map(|t| t.numel()).collect();
    let mut opts: Vec<AdamW<S>> = models.iter().map(|_| AdamW::new(cfg.adamw, &slot_sizes)).collect();
    let mut head_opt = AdamW::new(cfg.adamw, &[head.weight.numel(), head.bias.numel()]);
    let totals: Vec<usize> = profiles.iter().map(|p| cfg.total_steps(p.train.len())).collect();
    let head_total: usize = totals.iter().sum();
    let mut steps = vec![0usize; profiles.len()];
    let mut head_steps = 0usize;
    let mut losses = vec![Vec::new(); profiles.len()];

    // profile i shuffles exactly as a lone run seeded with `seed + i` would
    let mut order_rngs: Vec<ChaCha8Rng> = (0..profiles.len())
        .map(|i| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64)))
        .collect();
    let mut orders: Vec<Vec<usize>> = profiles.iter().map(|p| (0..p.train.len()).collect()).collect();
    let max_batches = profiles.iter().map(|p| cfg.steps_per_epoch(p.train.len())).max().unwrap_or(0);

    for _ in 0..cfg.epochs {
        for (order, rng) in orders.iter_mut().zip(&mut order_rngs) {
            order.shuffle(rng);
        }
        for j in 0..max_batches {
            for (p, prof) in profiles.iter().enumerate() {
                let Some(chunk) = orders[p].chunks(cfg.batch_size).nth(j) else {
                    continue;
                };
                let model = &mut models[p];
                model.head.weight.data_mut().copy_from_slice(head.weight.data());
                model.head.bias.data_mut().copy_from_slice(head.bias.data());

                let tokens: Vec<Vec<u32>> = chunk.iter().map(|&i| prof.train[i].tokens.clone()).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| prof.train[i].label).collect();
                let mut tape = Tape::new();
                // single adapters are deterministic, so no noise source is needed
                let f = model.forward(&mut tape, &tokens, Pass::Eval)?;
                let loss = tape.cross_entropy(f.logits, &labels)?;
                let value = tape.item(loss).to_f64_exact();
                let diverged = |step| Error::ProfileDiverged {
                    profile: prof.id.clone(),
                    source: Box::new(Error::Diverged { step }),
                };
                if !value.is_finite() {
                    return Err(diverged(steps[p]));
                }
                tape.backward(loss)?;
                let n = f.bound.len();
                let grad = |v| tape.grad(v).map(<[S]>::to_vec);
                let mut slot_grads: Vec<Option<Vec<S>>> = f.bound.iter().map(|&v| grad(v)).collect();
                let head_grads = vec![slot_grads[n - 2].take(), slot_grads[n - 1].take()];

                let lr = linear_decay(cfg.lr, steps[p], totals[p]);
                opts[p].step(&mut model.parameters_mut(), &slot_grads, lr);
                let head_lr = linear_decay(cfg.lr, head_steps, head_total);
                head_opt.step(&mut [&mut head.weight, &mut head.bias], &head_grads, head_lr);
                if model.parameters().into_iter().chain([&head.weight, &head.bias]).any(|t| t.data().iter().any(|v| !v.is_finite())) {
                    return Err(diverged(steps[p]));
                }
                losses[p].push(value);
                steps[p] += 1;
                head_steps += 1;
            }
        }
    }

    let adapters: Vec<Vec<AdapterPair<S>>> = models
        .into_iter()
        .map(|m| match m.slot {
            Slot::Single(pairs) => pairs,
            _ => unreachable!("warm-start models always hold a single adapter"),
        })
        .collect();
    let bank = AdapterBank::from_trained(&adapters, cfg.seed)?;
    head.set_trainable(false);
    Ok(WarmStart { bank, head, losses })
}
