//! Subcommands of the `xpeft` binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use xpeft::codec::accounting::{self, PAPER_SCALE_B, PAPER_SCALE_D, PAPER_SCALE_L};
use xpeft::codec::atomic_write;
use xpeft::codec::profile::{MaskMode, ProfileRecord};
use xpeft::model::Model;
use xpeft::sim::bench::{run_benchmark, BenchmarkConfig, BenchmarkReport, BenchmarkSummary};
use xpeft::sim::data::{group, parse_tsv, read_dataset, write_dataset};
use xpeft::sim::registry::{bit_grid_csv, warm_record, Provenance, ProfileRegistry, INDEX_FILE};
use xpeft::sim::{generate_profiles, mask_distances, run_campaign, warm_start, CampaignSetup, ProfileData};
use xpeft::train::{evaluate, sweep_csv, top_k_sweep, train, Metrics, TrainConfig, TrainMode};
use xpeft::{AdapterBank, Backbone, ExperimentConfig, Head};

/// Bad flags, bad config or missing inputs; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

#[derive(Parser, Debug)]
#[command(name = "xpeft", version, about = "Per-profile mask tensors over a frozen adapter bank")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    XPeftSoft,
    XPeftHard,
    SingleAdapter,
    HeadOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::XPeftSoft => TrainMode::XPeftSoft,
            ModeArg::XPeftHard => TrainMode::XPeftHard,
            ModeArg::SingleAdapter => TrainMode::SingleAdapter,
            ModeArg::HeadOnly => TrainMode::HeadOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskArg {
    Soft,
    Hard,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a config file holding every key at its default value.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the seeded frozen backbone described by a config.
    BuildBackbone {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a seeded random adapter bank.
    BuildBank {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        b: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic multi-profile dataset directory.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one adapter per warm profile (the first `n` in the data) with a
    /// shared head, and save them as a bank.
    WarmStart {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_bank: PathBuf,
        #[arg(long)]
        out_head: PathBuf,
        /// Also register every warm profile here.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Train the masks of one profile and write its record, loss CSV and
    /// run summary.
    TrainProfile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Shared head; required unless the config sets `train_head = true`.
        #[arg(long)]
        head: Option<PathBuf>,
        /// Dataset directory or a single TSV file.
        #[arg(long)]
        profile_data: PathBuf,
        /// Profile id to train when the data holds several.
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a stored profile record.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Used when the record carries no head of its own.
        #[arg(long)]
        head: Option<PathBuf>,
        /// Profile record file.
        #[arg(long)]
        profile: PathBuf,
        /// Dataset directory (holdout split is used) or a TSV file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every profile after the warm ones and register the records.
    Campaign {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Trainable-parameter and storage accounting as CSV.
    Account {
        /// Both modes when omitted.
        #[arg(long, value_enum)]
        mode: Option<MaskArg>,
        /// Bank sizes; defaults to 100,200,400 with --paper-scale.
        #[arg(long, value_delimiter = ',')]
        n: Vec<u64>,
        #[arg(long)]
        l: Option<u64>,
        #[arg(long)]
        b: Option<u64>,
        #[arg(long)]
        d: Option<u64>,
        /// Use L=12, d=768, b=48.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cumulative storage as the number of profiles grows, as CSV.
    Scaling {
        #[arg(long)]
        p_max: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        l: Option<u64>,
        #[arg(long)]
        b: Option<u64>,
        #[arg(long)]
        d: Option<u64>,
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise mask distances of the hard mask-only profiles in a registry,
    /// plus bit grids of the most distant pair.
    MaskDistance {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one hard-mode profile per k and compare.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        profile_data: PathBuf,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the synthetic arm comparison over several seeds.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "42,43,44")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Per-seed CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn input(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("file not found: {}", path.display())))
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    atomic_write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(input(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Applies `--mode` / `--k` overrides and checks the combination.
fn resolve_train(cfg: &ExperimentConfig, mode: Option<ModeArg>, k: Option<usize>) -> Result<TrainConfig> {
    let mut t = cfg.train.clone();
    if let Some(m) = mode {
        t.mode = m.into();
        if t.mode != TrainMode::XPeftHard {
            t.k = None;
        }
    }
    if let Some(k) = k {
        if t.mode != TrainMode::XPeftHard {
            return Err(usage(format!("--k only applies to x-peft-hard, not {}", t.mode.as_str())));
        }
        if k == 0 || k > cfg.n {
            return Err(usage(format!("--k {k} must lie in 1..={}", cfg.n)));
        }
        t.k = Some(k);
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    Ok(t)
}

fn load_bank(path: &Path) -> Result<Arc<AdapterBank>> {
    let bank = AdapterBank::load(input(path)?).with_context(|| format!("loading bank {}", path.display()))?;
    Ok(Arc::new(bank))
}

fn load_head(path: Option<&Path>) -> Result<Option<Head>> {
    path.map(|p| Head::load(input(p)?).with_context(|| format!("loading head {}", p.display())))
        .transpose()
}

fn build_backbone(cfg: &ExperimentConfig) -> Result<Arc<Backbone>> {
    Ok(Arc::new(Backbone::build(cfg.backbone)?))
}

/// A dataset directory, or one TSV file read as training rows only.
fn load_profiles(path: &Path) -> Result<Vec<ProfileData>> {
    let path = input(path)?;
    if path.is_dir() {
        return read_dataset(path).with_context(|| format!("reading dataset {}", path.display()));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_tsv(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(group(rows)
        .into_iter()
        .map(|(id, train)| ProfileData {
            id,
            train,
            holdout: Vec::new(),
        })
        .collect())
}

fn pick_profile(profiles: Vec<ProfileData>, id: Option<&str>) -> Result<ProfileData> {
    match id {
        Some(id) => profiles
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| usage(format!("profile {id} not found in the data"))),
        None if profiles.len() == 1 => Ok(profiles.into_iter().next().expect("one profile")),
        None => Err(usage(format!("the data holds {} profiles; pass --profile", profiles.len()))),
    }
}

fn metrics_line(m: &Metrics) -> String {
    format!("accuracy={:.6} macro_f1={:.6}", m.accuracy, m.macro_f1)
}

fn setup(
    cfg: &ExperimentConfig,
    bank: Option<Arc<AdapterBank>>,
    head: Option<Head>,
    t: &TrainConfig,
) -> Result<CampaignSetup<f32>> {
    if head.is_none() && !t.train_head && t.mode != TrainMode::HeadOnly {
        return Err(usage("a shared --head is needed unless the config sets train_head = true"));
    }
    Ok(CampaignSetup {
        backbone: build_backbone(cfg)?,
        bank,
        shared_head: head,
        classes: cfg.data.classes,
        bottleneck: cfg.bottleneck,
        options: cfg.adapter_options(),
    })
}

fn open_or_create(dir: &Path) -> Result<ProfileRegistry> {
    let reg = if dir.join(INDEX_FILE).exists() {
        ProfileRegistry::open(dir)
    } else {
        ProfileRegistry::create(dir)
    };
    reg.with_context(|| format!("opening registry {}", dir.display()))
}

fn paper_dims(paper: bool, l: Option<u64>, b: Option<u64>, d: Option<u64>) -> Result<(u64, u64, u64)> {
    if paper {
        return Ok((PAPER_SCALE_L, PAPER_SCALE_B, PAPER_SCALE_D));
    }
    match (l, b, d) {
        (Some(l), Some(b), Some(d)) => Ok((l, b, d)),
        _ => Err(usage("--l, --b and --d are required without --paper-scale")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { out } => write_file(&out, ExperimentConfig::default().to_text().as_bytes()),

        Command::BuildBackbone { config, out } => {
            let cfg = load_config(&config)?;
            let bb = build_backbone(&cfg)?;
            bb.save(&out)?;
            println!("backbone {} params, checksum {}", bb.param_count(), bb.checksum());
            Ok(())
        }

        Command::BuildBank { n, l, b, d, seed, out } => {
            let bank = AdapterBank::random(n, l, b, d, seed).map_err(|e| usage(e.to_string()))?;
            bank.save(&out)?;
            println!("bank N={n} L={l} b={b} d={d} checksum {}", bank.checksum());
            Ok(())
        }

        Command::GenerateData { config, out } => {
            let cfg = load_config(&config)?;
            let profiles = generate_profiles(&cfg.data)?;
            write_dataset(&out, &profiles)?;
            println!("{} profiles written to {}", profiles.len(), out.display());
            Ok(())
        }

        Command::WarmStart {
            config,
            data,
            out_bank,
            out_head,
            registry,
        } => {
            let cfg = load_config(&config)?;
            let profiles = load_profiles(&data)?;
            if profiles.len() < cfg.n {
                return Err(usage(format!(
                    "warm start needs n = {} profiles, the data holds {}",
                    cfg.n,
                    profiles.len()
                )));
            }
            let warm_profiles = &profiles[..cfg.n];
            let backbone = build_backbone(&cfg)?;
            let options = cfg.adapter_options();
            let warm = warm_start(
                backbone.clone(),
                warm_profiles,
                cfg.bottleneck,
                cfg.data.classes,
                &cfg.warm_train(),
                options,
            )?;
            warm.bank.save(&out_bank)?;
            warm.head.save(&out_head)?;
            let checksum = warm.bank.checksum();
            println!("warm bank N={} checksum {checksum}", warm.bank.n());
            if let Some(dir) = registry {
                let mut reg = open_or_create(&dir)?;
                let bank = Arc::new(warm.bank);
                for (i, p) in warm_profiles.iter().enumerate() {
                    let rec = warm_record(&p.id, i, bank.n(), bank.layers(), bank.bottleneck())?;
                    let metrics = if p.holdout.is_empty() {
                        None
                    } else {
                        let m = Model::from_record(backbone.clone(), bank.clone(), &rec, Some(&warm.head), options)?;
                        Some(evaluate(&m, &p.holdout)?)
                    };
                    reg.add(&rec, Provenance::WarmAdapter, &checksum, metrics)?;
                }
            }
            Ok(())
        }

        Command::TrainProfile {
            config,
            bank,
            head,
            profile_data,
            profile,
            mode,
            k,
            out,
        } => {
            let cfg = load_config(&config)?;
            let t = resolve_train(&cfg, mode, k)?;
            if t.mode.mask_mode().is_none() {
                return Err(usage("train-profile writes a profile record, so the mode must be x-peft-soft or x-peft-hard"));
            }
            let bank = load_bank(&bank)?;
            let head = load_head(head.as_deref())?;
            let prof = pick_profile(load_profiles(&profile_data)?, profile.as_deref())?;
            if prof.train.is_empty() {
                return Err(usage(format!("profile {} has no training rows", prof.id)));
            }
            let s = setup(&cfg, Some(bank), head, &t)?;
            let mut model = s.model_for(&t, 0)?;
            let log = train(&mut model, &prof.train, None, &t)?;
            let record = model.to_record(&prof.id, t.train_head)?;
            record.save(&out)?;
            write_file(&sibling(&out, "loss.csv"), log.loss_csv().as_bytes())?;
            write_file(&sibling(&out, "summary.json"), log.summary().as_bytes())?;
            print!("profile {} final_train_loss={:.6}", prof.id, log.final_train_loss());
            if !prof.holdout.is_empty() {
                print!(" {}", metrics_line(&evaluate(&model, &prof.holdout)?));
            }
            println!();
            Ok(())
        }

        Command::Eval {
            config,
            bank,
            head,
            profile,
            data,
        } => {
            let cfg = load_config(&config)?;
            let bank = load_bank(&bank)?;
            let head = load_head(head.as_deref())?;
            let record = ProfileRecord::load(input(&profile)?)
                .with_context(|| format!("loading profile {}", profile.display()))?;
            let profiles = load_profiles(&data)?;
            let prof = profiles
                .into_iter()
                .find(|p| p.id == record.profile_id)
                .ok_or_else(|| usage(format!("profile {} not found in the data", record.profile_id)))?;
            let rows = if prof.holdout.is_empty() { &prof.train } else { &prof.holdout };
            if rows.is_empty() {
                return Err(usage(format!("profile {} has no rows to evaluate", prof.id)));
            }
            if record.head.is_none() && head.is_none() {
                return Err(usage("the record has no head; pass --head"));
            }
            let model = Model::from_record(build_backbone(&cfg)?, bank, &record, head.as_ref(), cfg.adapter_options())?;
            println!("profile {} {}", prof.id, metrics_line(&evaluate(&model, rows)?));
            Ok(())
        }

        Command::Campaign {
            config,
            data,
            bank,
            head,
            registry,
            mode,
            k,
            jobs,
        } => {
            let cfg = load_config(&config)?;
            let t = resolve_train(&cfg, mode, k)?;
            let bank = load_bank(&bank)?;
            let checksum = bank.checksum();
            let head = load_head(head.as_deref())?;
            let profiles = load_profiles(&data)?;
            let rest = profiles.get(cfg.n..).unwrap_or(&[]);
            let s = setup(&cfg, Some(bank), head, &t)?;
            let campaign = run_campaign(&s, rest, &t, jobs)?;
            let mut reg = open_or_create(&registry)?;
            for o in &campaign.outcomes {
                write_file(&registry.join(format!("{}.loss.csv", o.id)), o.log.loss_csv().as_bytes())?;
                if let Some(rec) = &o.record {
                    reg.add(rec, Provenance::MaskOnly, &checksum, Some(o.metrics))?;
                }
            }
            match campaign.aggregate {
                Some(m) => println!("{} profiles, mean {}", campaign.outcomes.len(), metrics_line(&m)),
                None => println!("no profiles to train"),
            }
            Ok(())
        }

        Command::Account {
            mode,
            n,
            l,
            b,
            d,
            paper_scale,
            out,
        } => {
            let (l, b, d) = paper_dims(paper_scale, l, b, d)?;
            let ns = match (n.is_empty(), paper_scale) {
                (false, _) => n,
                (true, true) => vec![100, 200, 400],
                (true, false) => return Err(usage("--n is required without --paper-scale")),
            };
            let modes = match mode {
                Some(MaskArg::Soft) => vec![MaskMode::Soft],
                Some(MaskArg::Hard) => vec![MaskMode::Hard],
                None => vec![MaskMode::Hard, MaskMode::Soft],
            };
            let reports: Vec<_> = modes
                .iter()
                .flat_map(|&m| ns.iter().map(move |&n| accounting::account(m, n, l, b, d)))
                .collect();
            emit(out.as_deref(), &accounting::accounting_csv(&reports))
        }

        Command::Scaling {
            p_max,
            n,
            l,
            b,
            d,
            paper_scale,
            out,
        } => {
            let (l, b, d) = paper_dims(paper_scale, l, b, d)?;
            emit(out.as_deref(), &accounting::scaling_csv(&accounting::scaling_table(p_max, n, l, b, d)))
        }

        Command::MaskDistance { registry, out } => {
            let reg = ProfileRegistry::open(input(&registry)?)
                .with_context(|| format!("opening registry {}", registry.display()))?;
            let mut records = Vec::new();
            for e in reg.entries().iter().filter(|e| e.provenance == Provenance::MaskOnly) {
                let r = reg.load(e)?;
                if r.mode == MaskMode::Hard {
                    records.push(r);
                } else {
                    log::info!("skipping soft profile {}", r.profile_id);
                }
            }
            let refs: Vec<&ProfileRecord> = records.iter().collect();
            let report = mask_distances(&refs)?;
            write_file(&out.join("distances.csv"), report.matrix_csv().as_bytes())?;
            let (i, j) = report.farthest;
            for r in [&records[i], &records[j]] {
                write_file(&out.join(format!("grid_{}.csv", r.profile_id)), bit_grid_csv(r)?.as_bytes())?;
            }
            println!(
                "farthest pair {} {} distance {:.6}",
                report.ids[i], report.ids[j], report.matrix[i][j]
            );
            Ok(())
        }

        Command::SweepK {
            config,
            bank,
            head,
            profile_data,
            profile,
            ks,
            out,
        } => {
            let cfg = load_config(&config)?;
            let t = TrainConfig {
                mode: TrainMode::XPeftHard,
                k: Some(1),
                ..cfg.train.clone()
            };
            let bank = load_bank(&bank)?;
            let n = bank.n();
            let head = load_head(head.as_deref())?;
            let prof = pick_profile(load_profiles(&profile_data)?, profile.as_deref())?;
            let s = setup(&cfg, Some(bank), head, &t)?;
            let eval = (!prof.holdout.is_empty()).then_some(prof.holdout.as_slice());
            let rows = top_k_sweep(|c| s.model_for(c, 0), n, &prof.train, eval, &t, &ks)?;
            emit(out.as_deref(), &sweep_csv(&rows))
        }

        Command::Benchmark { seeds, jobs, out } => {
            let base = BenchmarkConfig {
                jobs,
                ..Default::default()
            };
            let mut reports: Vec<BenchmarkReport> = Vec::new();
            let mut csv = String::new();
            for &seed in &seeds {
                log::info!("benchmark seed {seed}");
                let r = run_benchmark(&base.with_seed(seed))?;
                let text = r.to_csv();
                let body = if csv.is_empty() { &text[..] } else { text.split_once('\n').map_or("", |x| x.1) };
                csv.push_str(body);
                reports.push(r);
            }
            if reports.is_empty() {
                return Err(usage("--seeds must name at least one seed"));
            }
            if let Some(p) = out {
                write_file(&p, csv.as_bytes())?;
            }
            let s = BenchmarkSummary::from_reports(&reports);
            print!("{}", s.to_text());
            for (name, ok) in [
                ("x_peft >= head_only + 0.03", s.beats_head_only()),
                ("warm >= random", s.warm_beats_random()),
                ("soft loss falls with N", s.loss_falls_with_n()),
                ("two_masks <= m_b_only", s.two_masks_win()),
            ] {
                println!("{name}: {}", if ok { "yes" } else { "no" });
            }
            Ok(())
        }
    }
}

/// `dir/record.xppr` -> `dir/record.<ext>`.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}
