//! Desk-scale benchmark comparing the training arms on synthetic profiles.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::adapter::mask::MaskVariant;
use crate::adapter::{AdapterBank, AdapterOptions};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::model::{Head, Model};
use crate::sim::campaign::{run_campaign, CampaignSetup};
use crate::sim::data::{generate_profiles, SyntheticSpec};
use crate::sim::warm::warm_start;
use crate::train::{train, Metrics, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub backbone: BackboneConfig,
    pub data: SyntheticSpec,
    /// Warm profiles, which is also the bank size of both arms.
    pub warm: usize,
    pub mask_only: usize,
    /// Samples per warm profile; mask-only profiles use `data.samples`.
    pub warm_samples: usize,
    pub bottleneck: usize,
    pub k: usize,
    pub warm_train: TrainConfig,
    pub profile_train: TrainConfig,
    /// Bank sizes for the capacity scan.
    pub scan_sizes: Vec<usize>,
    /// Samples of the single profile used by the capacity and ablation runs.
    pub scan_samples: usize,
    pub scan_train: TrainConfig,
    pub jobs: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let base = TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-2,
            ..Default::default()
        };
        BenchmarkConfig {
            backbone: BackboneConfig {
                layers: 2,
                hidden: 32,
                heads: 2,
                vocab: 64,
                max_seq: 16,
                seed: 42,
            },
            data: SyntheticSpec {
                seq_len: 8,
                active_vocab: 12,
                permutations: 1,
                ..Default::default()
            },
            warm: 20,
            mask_only: 30,
            warm_samples: 300,
            bottleneck: 8,
            k: 5,
            warm_train: TrainConfig { lr: 5e-3, ..base.clone() },
            profile_train: base.clone(),
            scan_sizes: vec![10, 20, 40],
            scan_samples: 200,
            scan_train: TrainConfig {
                epochs: 30,
                lr: 0.1,
                ..base
            },
            jobs: 1,
            seed: 42,
        }
    }
}

impl BenchmarkConfig {
    /// Same setup with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.backbone.seed = seed;
        c.data.seed = seed.wrapping_add(1);
        for t in [&mut c.warm_train, &mut c.profile_train, &mut c.scan_train] {
            t.seed = seed.wrapping_add(2);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub seed: u64,
    /// Mean last-epoch loss of the warm-start adapters.
    pub warm_loss: f64,
    pub head_only: Metrics,
    pub warm_soft: Metrics,
    pub warm_hard: Metrics,
    pub random_soft: Metrics,
    pub random_hard: Metrics,
    /// `(N, final training loss)` of the soft capacity scan.
    pub scan: Vec<(usize, f64)>,
    pub two_masks_loss: f64,
    pub up_only_loss: f64,
}

impl BenchmarkReport {
    pub fn best_warm(&self) -> f64 {
        self.warm_soft.accuracy.max(self.warm_hard.accuracy)
    }

    pub fn best_random(&self) -> f64 {
        self.random_soft.accuracy.max(self.random_hard.accuracy)
    }

    pub fn best_x_peft(&self) -> f64 {
        self.best_warm().max(self.best_random())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,metric,value\n");
        let mut row = |name: &str, v: f64| writeln!(out, "{},{name},{v}", self.seed).unwrap();
        row("warm_start_loss", self.warm_loss);
        for (name, m) in [
            ("head_only", self.head_only),
            ("x_peft_warm_soft", self.warm_soft),
            ("x_peft_warm_hard", self.warm_hard),
            ("x_peft_random_soft", self.random_soft),
            ("x_peft_random_hard", self.random_hard),
        ] {
            row(&format!("{name}_accuracy"), m.accuracy);
            row(&format!("{name}_macro_f1"), m.macro_f1);
        }
        for &(n, l) in &self.scan {
            row(&format!("soft_loss_n{n}"), l);
        }
        row("two_masks_loss", self.two_masks_loss);
        row("m_b_only_loss", self.up_only_loss);
        out
    }
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let options = AdapterOptions::default();
    let classes = cfg.data.classes;
    let backbone = Arc::new(Backbone::<f32>::build(cfg.backbone)?);
    let data = SyntheticSpec {
        profiles: cfg.warm + cfg.mask_only,
        ..cfg.data.clone()
    };
    let profiles = generate_profiles(&data)?;
    let rest = &profiles[cfg.warm..];
    let warm_data = generate_profiles(&SyntheticSpec {
        profiles: cfg.warm,
        samples: cfg.warm_samples,
        ..cfg.data.clone()
    })?;
    let warm_profiles = &warm_data[..];

    let warm = warm_start(backbone.clone(), warm_profiles, cfg.bottleneck, classes, &cfg.warm_train, options)?;
    let per_epoch = cfg.warm_train.steps_per_epoch(cfg.warm_samples * 7 / 10);
    let warm_loss = warm
        .losses
        .iter()
        .map(|l| l[l.len() - per_epoch..].iter().sum::<f64>() / per_epoch as f64)
        .sum::<f64>()
        / warm.losses.len() as f64;
    let warm_bank = Arc::new(warm.bank);
    let d = cfg.backbone.hidden;
    let random_bank = Arc::new(AdapterBank::random(
        cfg.warm,
        cfg.backbone.layers,
        cfg.bottleneck,
        d,
        cfg.seed.wrapping_add(3),
    )?);

    let arm = |bank: Option<Arc<AdapterBank<f32>>>, mode: TrainMode, train_head: bool| -> Result<Metrics> {
        let setup = CampaignSetup {
            backbone: backbone.clone(),
            bank,
            shared_head: Some(warm.head.clone()),
            classes,
            bottleneck: cfg.bottleneck,
            options,
        };
        let tc = TrainConfig {
            mode,
            k: (mode == TrainMode::XPeftHard).then_some(cfg.k),
            train_head,
            ..cfg.profile_train.clone()
        };
        let c = run_campaign(&setup, rest, &tc, cfg.jobs)?;
        Ok(c.aggregate.unwrap_or(Metrics {
            accuracy: f64::NAN,
            macro_f1: f64::NAN,
        }))
    };
    let head_only = arm(None, TrainMode::HeadOnly, true)?;
    let warm_soft = arm(Some(warm_bank.clone()), TrainMode::XPeftSoft, false)?;
    let warm_hard = arm(Some(warm_bank.clone()), TrainMode::XPeftHard, false)?;
    let random_soft = arm(Some(random_bank.clone()), TrainMode::XPeftSoft, true)?;
    let random_hard = arm(Some(random_bank), TrainMode::XPeftHard, true)?;

    // Capacity scan and mask ablation on one larger profile.
    let scan_data = generate_profiles(&SyntheticSpec {
        profiles: 1,
        samples: cfg.scan_samples,
        seed: cfg.data.seed.wrapping_add(100),
        ..cfg.data.clone()
    })?;
    let scan_profile = &scan_data[0];
    let scan_loss = |n: usize, variant: MaskVariant| -> Result<f64> {
        let bank = Arc::new(AdapterBank::random(
            n,
            cfg.backbone.layers,
            cfg.bottleneck,
            d,
            cfg.seed.wrapping_add(4),
        )?);
        let tc = TrainConfig {
            mode: TrainMode::XPeftSoft,
            k: None,
            mask_variant: variant,
            train_head: true,
            ..cfg.scan_train.clone()
        };
        let head = Head::random(d, classes, cfg.seed.wrapping_add(5))?;
        let mut model = Model::masked(backbone.clone(), bank, tc.mask_settings().expect("soft"), head, options)?;
        Ok(train(&mut model, &scan_profile.train, None, &tc)?.final_train_loss())
    };
    let scan = cfg
        .scan_sizes
        .iter()
        .map(|&n| Ok((n, scan_loss(n, MaskVariant::TwoMasks)?)))
        .collect::<Result<Vec<_>>>()?;
    let two_masks_loss = scan_loss(cfg.warm, MaskVariant::TwoMasks)?;
    let up_only_loss = scan_loss(cfg.warm, MaskVariant::UpOnly)?;

    Ok(BenchmarkReport {
        seed: cfg.seed,
        warm_loss,
        head_only,
        warm_soft,
        warm_hard,
        random_soft,
        random_hard,
        scan,
        two_masks_loss,
        up_only_loss,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Per-claim medians over several seeds and the directional checks on them.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSummary {
    pub seeds: Vec<u64>,
    pub head_only: f64,
    pub best_x_peft: f64,
    pub best_warm: f64,
    pub best_random: f64,
    /// `(N, median final loss)` in scan order.
    pub scan: Vec<(usize, f64)>,
    pub two_masks_loss: f64,
    pub up_only_loss: f64,
}

impl BenchmarkSummary {
    /// # Panics
    /// If `reports` is empty or their scans cover different bank sizes.
    pub fn from_reports(reports: &[BenchmarkReport]) -> Self {
        assert!(!reports.is_empty(), "no benchmark reports");
        let med = |f: &dyn Fn(&BenchmarkReport) -> f64| median(reports.iter().map(f).collect());
        let scan = reports[0]
            .scan
            .iter()
            .enumerate()
            .map(|(i, &(n, _))| {
                assert!(reports.iter().all(|r| r.scan[i].0 == n), "scan sizes differ between reports");
                (n, med(&|r| r.scan[i].1))
            })
            .collect();
        BenchmarkSummary {
            seeds: reports.iter().map(|r| r.seed).collect(),
            head_only: med(&|r| r.head_only.accuracy),
            best_x_peft: med(&|r| r.best_x_peft()),
            best_warm: med(&|r| r.best_warm()),
            best_random: med(&|r| r.best_random()),
            scan,
            two_masks_loss: med(&|r| r.two_masks_loss),
            up_only_loss: med(&|r| r.up_only_loss),
        }
    }

    /// Best x_peft arm beats head_only by at least 0.03 accuracy.
    pub fn beats_head_only(&self) -> bool {
        self.best_x_peft >= self.head_only + 0.03
    }

    pub fn warm_beats_random(&self) -> bool {
        self.best_warm >= self.best_random
    }

    /// Loss never increases with N, and at least two of the ordered pairs
    /// (adjacent pairs plus first-vs-last) are strict.
    pub fn loss_falls_with_n(&self) -> bool {
        let l: Vec<f64> = self.scan.iter().map(|s| s.1).collect();
        if l.len() < 2 || l.windows(2).any(|w| w[1] > w[0]) {
            return false;
        }
        let mut strict = l.windows(2).filter(|w| w[1] < w[0]).count();
        if l.len() > 2 && l[l.len() - 1] < l[0] {
            strict += 1;
        }
        strict >= 2.min(l.len() - 1)
    }

    pub fn two_masks_win(&self) -> bool {
        self.two_masks_loss <= self.up_only_loss
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "seeds: {}", seeds.join(",")).unwrap();
        writeln!(out, "median head_only accuracy: {:.4}", self.head_only).unwrap();
        writeln!(out, "median best x_peft accuracy: {:.4}", self.best_x_peft).unwrap();
        writeln!(out, "median best warm / random: {:.4} / {:.4}", self.best_warm, self.best_random).unwrap();
        for (n, l) in &self.scan {
            writeln!(out, "median soft final loss N={n}: {l:.4}").unwrap();
        }
        writeln!(
            out,
            "median final loss two_masks / m_b_only: {:.4} / {:.4}",
            self.two_masks_loss, self.up_only_loss
        )
        .unwrap();
        out
    }
}
