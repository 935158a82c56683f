//! Per-profile training over many profiles against one frozen bank.

use std::sync::Arc;

use crate::adapter::{AdapterBank, AdapterOptions};
use crate::backbone::Backbone;
use crate::codec::profile::ProfileRecord;
use crate::error::{Error, Result};
use crate::model::{Head, Model, Slot};
use crate::scalar::Scalar;
use crate::sim::data::ProfileData;
use crate::train::{evaluate, train, Metrics, RunLog, TrainConfig, TrainMode};

#[derive(Clone, Debug)]
pub struct ProfileOutcome {
    pub id: String,
    pub log: RunLog,
    pub metrics: Metrics,
    /// Present for x_peft modes.
    pub record: Option<ProfileRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct Campaign {
    pub outcomes: Vec<ProfileOutcome>,
    /// Mean accuracy and macro-F1 over the outcomes; `None` when empty.
    pub aggregate: Option<Metrics>,
}

pub fn mean_metrics<'a>(ms: impl IntoIterator<Item = &'a Metrics>) -> Option<Metrics> {
    let (mut acc, mut f1, mut n) = (0.0, 0.0, 0usize);
    for m in ms {
        acc += m.accuracy;
        f1 += m.macro_f1;
        n += 1;
    }
    (n > 0).then(|| Metrics {
        accuracy: acc / n as f64,
        macro_f1: f1 / n as f64,
    })
}

/// Shared inputs of every per-profile run.
#[derive(Clone, Debug)]
pub struct CampaignSetup<S> {
    pub backbone: Arc<Backbone<S>>,
    pub bank: Option<Arc<AdapterBank<S>>>,
    /// Used frozen when `train_head` is off.
    pub shared_head: Option<Head<S>>,
    pub classes: usize,
    /// Bottleneck for `single_adapter` runs.
    pub bottleneck: usize,
    pub options: AdapterOptions,
}

impl<S: Scalar> CampaignSetup<S> {
    /// Fresh model for the profile at `index`, seeded from `cfg.seed + index`.
    pub fn model_for(&self, cfg: &TrainConfig, index: usize) -> Result<Model<S>> {
        let seed = cfg.seed.wrapping_add(index as u64);
        let head = if cfg.train_head || cfg.mode == TrainMode::HeadOnly {
            Head::random(self.backbone.hidden(), self.classes, seed)?
        } else {
            self.shared_head
                .clone()
                .ok_or_else(|| Error::config("a frozen shared head is required when train_head is off"))?
        };
        match cfg.mode {
            TrainMode::XPeftSoft | TrainMode::XPeftHard => {
                let bank = self.bank.clone().ok_or_else(|| Error::config("x_peft modes need a bank"))?;
                let settings = cfg.mask_settings().expect("x_peft modes carry mask settings");
                Model::masked(self.backbone.clone(), bank, settings, head, self.options)
            }
            TrainMode::SingleAdapter => {
                Model::single_adapter(self.backbone.clone(), self.bottleneck, seed, head, self.options)
            }
            TrainMode::HeadOnly => Model::new(self.backbone.clone(), Slot::Empty, head, self.options),
        }
    }

    fn run_one(&self, cfg: &TrainConfig, index: usize, profile: &ProfileData) -> Result<ProfileOutcome> {
        let mut model = self.model_for(cfg, index)?;
        let run_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(index as u64),
            ..cfg.clone()
        };
        let log = train(&mut model, &profile.train, None, &run_cfg).map_err(|e| Error::ProfileDiverged {
            profile: profile.id.clone(),
            source: Box::new(e),
        })?;
        let metrics = evaluate(&model, &profile.holdout)?;
        let record = match cfg.mode {
            TrainMode::XPeftSoft | TrainMode::XPeftHard => Some(model.to_record(&profile.id, cfg.train_head)?),
            _ => None,
        };
        Ok(ProfileOutcome {
            id: profile.id.clone(),
            log,
            metrics,
            record,
        })
    }
}

/// Trains every profile independently. `jobs > 1` spreads profiles over
/// worker threads; results do not depend on the worker count.
pub fn run_campaign<S: Scalar>(
    setup: &CampaignSetup<S>,
    profiles: &[ProfileData],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Campaign> {
    cfg.validate()?;
    let work: Vec<(usize, &ProfileData)> = profiles
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let ok = !p.holdout.is_empty() && !p.train.is_empty();
            if !ok {
                log::warn!("skipping profile {}: empty train or holdout split", p.id);
            }
            ok
        })
        .collect();

    let jobs = jobs.max(1).min(work.len().max(1));
    let mut slots: Vec<Option<Result<ProfileOutcome>>> = (0..work.len()).map(|_| None).collect();
    if jobs == 1 {
        for (slot, &(i, p)) in slots.iter_mut().zip(&work) {
            *slot = Some(setup.run_one(cfg, i, p));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let work = &work;
                    scope.spawn(move || {
                        work.iter()
                            .enumerate()
                            .skip(w)
                            .step_by(jobs)
                            .map(|(pos, &(i, p))| (pos, setup.run_one(cfg, i, p)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (pos, r) in h.join().expect("campaign worker panicked") {
                    slots[pos] = Some(r);
                }
            }
        });
    }
    let outcomes = slots
        .into_iter()
        .map(|s| s.expect("every profile is processed"))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = mean_metrics(outcomes.iter().map(|o| &o.metrics));
    Ok(Campaign { outcomes, aggregate })
}
