//! `ssvep`: training, fine-tuning, evaluation sweeps and analyses over
//! SSVEP archives.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ssvep_core::analysis::{self, StimulusLayout};
use ssvep_core::dataset::{self, SsvepArchive, TrialSet};
use ssvep_core::evaluation::{self, ProtocolConfig};
use ssvep_core::filterbank::{self, SubbandStack};
use ssvep_core::io;
use ssvep_core::network::{NetworkConfig, Parameters, TENSOR_NAMES};
use ssvep_core::seed;
use ssvep_core::training::{self, Checkpoint, Examples, Provenance, StageOutcome};

use config::{ChannelChoice, RunConfig, SynthCohort};

#[derive(Parser, Debug)]
#[command(
    name = "ssvep",
    version,
    about = "SSVEP target identification with a filter-bank CNN"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fold and subject tasks.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Channel set name (3, 6, 9, all) or comma-separated channel names.
    #[arg(long, global = true)]
    channels: Option<String>,
    #[arg(long, global = true)]
    subbands: Option<usize>,
    /// Comma-separated signal durations in seconds.
    #[arg(long, global = true)]
    durations: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage 1 on every block of every archive.
    TrainGlobal,
    /// Stage 2 per subject, starting from a global checkpoint.
    Finetune {
        #[arg(long)]
        global: PathBuf,
    },
    /// Leave-one-block-out evaluation over every duration.
    Sweep,
    Analyze {
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
    },
    /// Write synthetic subject archives.
    Synth,
    /// Print the header of an archive or checkpoint.
    Inspect { path: PathBuf },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AnalyzeMode {
    Distances,
    Importance,
    Synth,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Inspect { path } = &cli.command {
        return inspect(path);
    }
    let cfg = resolve_config(&cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("starting the worker pool")?;
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
    match &cli.command {
        Command::TrainGlobal => train_global(&cfg),
        Command::Finetune { global } => finetune(&cfg, global),
        Command::Sweep => sweep(&cfg),
        Command::Analyze { mode } => match mode {
            AnalyzeMode::Distances => distances(&cfg),
            AnalyzeMode::Importance => importance(&cfg),
            AnalyzeMode::Synth => synth(&cfg),
        },
        Command::Synth => synth(&cfg),
        Command::Inspect { .. } => unreachable!(),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = &cli.channels {
        cfg.channels = ChannelChoice::parse(c);
    }
    if let Some(n) = cli.subbands {
        cfg.n_subbands = n;
    }
    if let Some(d) = &cli.durations {
        cfg.durations_s = config::parse_durations(d)?;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(cfg: &RunConfig, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = cfg.out_dir.join(name);
    io::write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn load_archives(cfg: &RunConfig) -> Result<Vec<SsvepArchive>> {
    cfg.require_archives()?;
    cfg.archives
        .iter()
        .map(|p| dataset::read_archive(p).with_context(|| format!("loading archive {}", p.display())))
        .collect()
}

/// Epochs at `duration` restricted to the configured channels.
fn subject_trials(cfg: &RunConfig, archives: &[SsvepArchive], duration: f64) -> Result<Vec<TrialSet>> {
    let channels = cfg.channels.resolve()?;
    archives
        .iter()
        .map(|a| {
            let t = dataset::extract_epochs(a, duration)?;
            Ok(match &channels {
                Some(names) => dataset::select_channels(&t, names)?,
                None => t,
            })
        })
        .collect()
}

fn network_for(cfg: &RunConfig, trials: &TrialSet) -> Result<NetworkConfig> {
    Ok(NetworkConfig::new(
        trials.n_channels,
        trials.n_samples,
        cfg.n_subbands,
        trials.n_classes,
    )?)
}

fn loss_csv(outcome: &StageOutcome) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_history.iter().enumerate() {
        writeln!(s, "{},{l:.9}", i + 1).unwrap();
    }
    s
}

fn save_checked(cfg: &RunConfig, name: &str, cp: &Checkpoint) -> Result<()> {
    let path = write_out(cfg, name, &cp.to_bytes()?)?;
    training::load_checkpoint_for(&path, &cp.config)
        .with_context(|| format!("re-reading {}", path.display()))?;
    Ok(())
}

fn train_global(cfg: &RunConfig) -> Result<()> {
    let duration = cfg.single_duration()?;
    let archives = load_archives(cfg)?;
    let pooled = dataset::merge_trialsets(&subject_trials(cfg, &archives, duration)?)?;
    let stacks = filterbank::make_stacks(&pooled, &cfg.bank())?;
    let net = network_for(cfg, &pooled)?;
    let (stage1, _) = cfg.stages_for("train-global");
    let examples = Examples::from_trials(&pooled, &stacks)?;
    let outcome = training::train_global(&net, &examples, &stage1)?;
    let cp = Checkpoint {
        config: net,
        stage_config: stage1,
        provenance: Provenance {
            stage: "global".into(),
            subject_id: "global".into(),
            fold: None,
            final_loss: outcome.final_loss(),
        },
        params: outcome.params.clone(),
    };
    save_checked(cfg, "global.ckpt", &cp)?;
    write_out(cfg, "global_loss.csv", loss_csv(&outcome).as_bytes())?;
    Ok(())
}

fn finetune(cfg: &RunConfig, global_path: &Path) -> Result<()> {
    let duration = cfg.single_duration()?;
    let archives = load_archives(cfg)?;
    let sets = subject_trials(cfg, &archives, duration)?;
    let net = network_for(cfg, &sets[0])?;
    let global = training::load_checkpoint_for(global_path, &net).with_context(|| {
        format!(
            "global checkpoint {} does not fit this config",
            global_path.display()
        )
    })?;
    let bank = cfg.bank();
    let stacks: Vec<Vec<SubbandStack>> = sets
        .iter()
        .map(|t| filterbank::make_stacks(t, &bank))
        .collect::<ssvep_core::Result<_>>()?;
    let mut per_subject = BTreeMap::new();
    for ((a, t), s) in archives.iter().zip(&sets).zip(&stacks) {
        let id = a.meta().subject_id.clone();
        if per_subject
            .insert(id.clone(), Examples::from_trials(t, s)?)
            .is_some()
        {
            bail!("subject {id} appears twice");
        }
    }
    let (_, stage2) = cfg.stages_for("finetune");
    let tuned = training::fine_tune_all(&global.params, &per_subject, &stage2)?;
    for (id, outcome) in &tuned {
        let cp = Checkpoint {
            config: net,
            stage_config: stage2.with_seed(training::subject_seed(stage2.seed, id)),
            params: outcome.params.clone(),
            provenance: Provenance {
                stage: "finetune".into(),
                subject_id: id.clone(),
                fold: None,
                final_loss: outcome.final_loss(),
            },
        };
        save_checked(cfg, &format!("finetune_{id}.ckpt"), &cp)?;
        write_out(
            cfg,
            &format!("finetune_{id}_loss.csv"),
            loss_csv(outcome).as_bytes(),
        )?;
    }
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let archives = load_archives(cfg)?;
    let (stage1, stage2) = cfg.stages_for("sweep");
    let protocol = ProtocolConfig {
        durations_s: cfg.durations_s.clone(),
        channels: cfg.channels.resolve()?,
        bank: cfg.bank(),
        stage1,
        stage2,
        gaze_shift_s: cfg.gaze_shift_s,
        keep_models: false,
    };
    let report = evaluation::run_protocol(&archives, &protocol)?;
    write_out(cfg, "report.csv", report.to_csv().as_bytes())?;
    write_out(cfg, "report.json", report.to_json()?.as_bytes())?;
    write_out(
        cfg,
        "accuracy_table.csv",
        report.accuracy_table_csv("run").as_bytes(),
    )?;
    for row in &report.rows {
        write_out(
            cfg,
            &format!("confusion_T{:.2}.csv", row.duration_s),
            row.confusion.to_csv().as_bytes(),
        )?;
    }
    Ok(())
}

fn distances(cfg: &RunConfig) -> Result<()> {
    for &d in &cfg.durations_s {
        let layout = StimulusLayout::speller40(d);
        let matrix = analysis::sinusoid_distance_matrix(&layout)?;
        write_out(
            cfg,
            &format!("distances_T{d:.2}.csv"),
            analysis::distance_matrix_csv(&layout, &matrix).as_bytes(),
        )?;
    }
    Ok(())
}

fn importance(cfg: &RunConfig) -> Result<()> {
    let duration = cfg.single_duration()?;
    let archives = load_archives(cfg)?;
    let (stage1, _) = cfg.stages_for("importance");
    let out = analysis::channel_importance(&archives, duration, &cfg.bank(), &stage1)?;
    write_out(
        cfg,
        "importance.csv",
        analysis::importance_csv(&out.weights).as_bytes(),
    )?;
    write_out(cfg, "importance_loss.csv", loss_csv(&out.training).as_bytes())?;
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let cohort = cfg.synth.clone().unwrap_or_else(|| SynthCohort::demo(cfg.seed));
    let phases = if cohort.phases_rad.is_empty() {
        vec![0.0; cohort.freqs_hz.len()]
    } else {
        cohort.phases_rad.clone()
    };
    for spec in &cohort.subjects {
        let mut spec = spec.clone();
        spec.seed = seed::derive(cfg.seed, &["synth", &spec.subject_id]);
        let mut freqs = cohort.freqs_hz.clone();
        if cohort.reversed.contains(&spec.subject_id) {
            freqs.reverse();
        }
        let archive = analysis::generate_synthetic(&spec, &freqs, &phases)
            .with_context(|| format!("synthesizing subject {}", spec.subject_id))?;
        let path = write_out(cfg, &format!("{}.ssvep", spec.subject_id), &archive.to_bytes()?)?;
        dataset::read_archive(&path).with_context(|| format!("re-reading {}", path.display()))?;
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = io::read_file(path)?;
    let magic = bytes.get(..8).unwrap_or(&bytes[..]);
    if magic == dataset::ARCHIVE_MAGIC {
        let a = SsvepArchive::from_bytes(&bytes).with_context(|| format!("reading {}", path.display()))?;
        println!("archive {}", path.display());
        println!("{}", serde_json::to_string_pretty(a.meta())?);
        println!("samples stored: {}", a.data().len());
    } else if magic == training::CHECKPOINT_MAGIC {
        let cp = Checkpoint::from_bytes(&bytes).with_context(|| format!("reading {}", path.display()))?;
        println!("checkpoint {}", path.display());
        let header = serde_json::json!({
            "config": cp.config,
            "stage_config": cp.stage_config,
            "provenance": cp.provenance,
        });
        println!("{}", serde_json::to_string_pretty(&header)?);
        for (name, shape) in TENSOR_NAMES.iter().zip(Parameters::shapes(&cp.config)) {
            println!("{name}: {shape:?}");
        }
    } else {
        bail!("{} is neither an archive nor a checkpoint", path.display());
    }
    Ok(())
}
