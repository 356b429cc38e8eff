//! `relikin`: generate corpora, train and fine-tune models, evaluate
//! uncertainty and run noise sweeps. Every command writes a
//! `run_manifest.json` that `relikin rerun` replays.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use relikin_core::data::{GeneratorConfig, Split};
use relikin_core::reliability::{default_coverage_grid, DEFAULT_OUTLIER_MM, DEFAULT_SIGMAS_MM};
use relikin_core::uncertainty::{AleatoricMode, UncertaintyKind};

use commands::{
    fit_model_to_corpus, launch, rerun, EvalRun, FinetuneRun, GenerateRun, OutlierRule, SweepRun, TrainRun,
};
use config::FileConfig;
use manifest::RunManifest;

/// Exit codes by failure class.
mod exit {
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const DATA: u8 = 5;
    pub const NUMERIC: u8 = 6;
}

#[derive(Parser)]
#[command(
    name = "relikin",
    version,
    about = "Uncertainty-aware keypoint to landmark regression"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RELIKIN_THREADS")]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its subject split.
    Generate(GenerateArgs),
    /// Train the deterministic baseline.
    Train(TrainArgs),
    /// Warm-start and train the heteroscedastic model from a baseline.
    FinetuneHetero(FinetuneArgs),
    /// MC-dropout evaluation and reliability report.
    Eval(EvalArgs),
    /// Reliability under injected input noise.
    Sweep(SweepArgs),
    /// Replay a run from its run_manifest.json.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Benchmark,
    AffineToy,
    Calibration,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Starting point; a `[generator]` table in --config overrides it.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainingFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds initialisation, shuffling and training dropout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingFlags,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum AleatoricFlag {
    Averaged,
    SinglePass,
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds the dropout masks (and the input noise of a sweep).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long, value_enum)]
    aleatoric: Option<AleatoricFlag>,
    /// Score used for ranking frames.
    #[arg(long, default_value = "epi")]
    uncertainty: UncertaintyKind,
    #[arg(long, default_value_t = DEFAULT_OUTLIER_MM, conflicts_with = "outlier_quantile")]
    outlier_mm: f64,
    /// Use this quantile of the undegraded frame errors as outlier threshold.
    #[arg(long)]
    outlier_quantile: Option<f64>,
    /// Clips per forward batch.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    sampling: SamplingFlags,
    #[arg(long, value_delimiter = ',')]
    coverage: Option<Vec<f64>>,
    /// Skip the per-clip prediction tables.
    #[arg(long)]
    no_dump: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Noise levels in mm.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_generate(a: GenerateArgs) -> Result<GenerateRun> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut generator = match (file.generator, a.preset) {
        (Some(g), _) => g,
        (None, Preset::Default) => GeneratorConfig::default(),
        (None, Preset::Benchmark) => GeneratorConfig::benchmark(),
        (None, Preset::AffineToy) => GeneratorConfig::affine_toy(),
        (None, Preset::Calibration) => GeneratorConfig::calibration(),
    };
    if let Some(seed) = a.seed {
        generator.seed = seed;
    }
    generator.validate()?;
    Ok(GenerateRun { out: a.out, generator })
}

fn resolve_training(file: &FileConfig, f: &TrainingFlags) -> Result<relikin_core::training::TrainingConfig> {
    let mut t = file.training.clone().unwrap_or_default();
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if let Some(v) = f.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = f.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = f.patience {
        t.patience = v;
    }
    t.validate()?;
    Ok(t)
}

fn resolve_train(a: TrainArgs) -> Result<TrainRun> {
    let file = FileConfig::load(a.training.config.as_deref())?;
    let training = resolve_training(&file, &a.training)?;
    let mut model = file.model.clone().unwrap_or_default();
    if let Some(v) = a.hidden_size {
        model.hidden_size = v;
    }
    if let Some(v) = a.num_layers {
        model.num_layers = v;
    }
    if let Some(v) = a.dropout_rate {
        model.dropout_rate = v;
    }
    if model.heteroscedastic {
        bail!("train builds the deterministic baseline; use finetune-hetero for the heteroscedastic model");
    }
    let model = fit_model_to_corpus(model, &a.corpus)?;
    model.validate()?;
    Ok(TrainRun {
        init_seed: training.seed,
        corpus: a.corpus,
        out: a.out,
        model,
        training,
    })
}

fn resolve_finetune(a: FinetuneArgs) -> Result<FinetuneRun> {
    let file = FileConfig::load(a.training.config.as_deref())?;
    if file.model.is_some() {
        bail!("finetune-hetero takes the model from the baseline checkpoint; remove the [model] table");
    }
    let training = resolve_training(&file, &a.training)?;
    Ok(FinetuneRun {
        head_seed: training.seed,
        baseline: a.baseline,
        corpus: a.corpus,
        out: a.out,
        training,
    })
}

struct Sampling {
    sampler: relikin_core::uncertainty::SamplerConfig,
    outlier: OutlierRule,
}

fn resolve_sampling(s: &SamplingFlags) -> Result<Sampling> {
    let file = FileConfig::load(s.config.as_deref())?;
    let mut sampler = file.sampler.unwrap_or_default();
    if let Some(v) = s.seed {
        sampler.base_seed = v;
    }
    if let Some(v) = s.mc_samples {
        sampler.num_samples = v;
    }
    if let Some(v) = s.dropout_rate {
        sampler.dropout_rate = v;
    }
    if let Some(v) = s.aleatoric {
        sampler.aleatoric = match v {
            AleatoricFlag::Averaged => AleatoricMode::Averaged,
            AleatoricFlag::SinglePass => AleatoricMode::SinglePass,
        };
    }
    sampler.validate()?;
    let outlier = match s.outlier_quantile {
        Some(q) if (0.0..=1.0).contains(&q) => OutlierRule::Quantile { q },
        Some(q) => bail!("outlier quantile {q} outside [0, 1]"),
        None => OutlierRule::Fixed { mm: s.outlier_mm },
    };
    if s.batch_size == 0 {
        bail!("batch size must be positive");
    }
    Ok(Sampling { sampler, outlier })
}

fn resolve_eval(a: EvalArgs) -> Result<EvalRun> {
    let s = resolve_sampling(&a.sampling)?;
    let f = a.sampling;
    Ok(EvalRun {
        checkpoint: f.checkpoint,
        corpus: f.corpus,
        split: f.split,
        out: f.out,
        sampler: s.sampler,
        kind: f.uncertainty,
        outlier: s.outlier,
        coverage_grid: a.coverage.unwrap_or_else(default_coverage_grid),
        batch_size: f.batch_size,
        dump_predictions: !a.no_dump,
    })
}

fn resolve_sweep(a: SweepArgs) -> Result<SweepRun> {
    let s = resolve_sampling(&a.sampling)?;
    let f = a.sampling;
    Ok(SweepRun {
        noise_seed: s.sampler.base_seed,
        checkpoint: f.checkpoint,
        corpus: f.corpus,
        split: f.split,
        out: f.out,
        sampler: s.sampler,
        kind: f.uncertainty,
        outlier: s.outlier,
        sigmas_mm: a.sigmas.unwrap_or_else(|| DEFAULT_SIGMAS_MM.to_vec()),
        batch_size: f.batch_size,
    })
}

fn dispatch(command: Command) -> Result<RunManifest> {
    match command {
        Command::Generate(a) => launch(&resolve_generate(a)?),
        Command::Train(a) => launch(&resolve_train(a)?),
        Command::FinetuneHetero(a) => launch(&resolve_finetune(a)?),
        Command::Eval(a) => launch(&resolve_eval(a)?),
        Command::Sweep(a) => launch(&resolve_sweep(a)?),
        Command::Rerun(a) => rerun(&RunManifest::load(&a.manifest)?, a.out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use relikin_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => exit::CONFIG,
                E::Io { .. } => exit::IO,
                E::NonFinite { .. } => exit::NUMERIC,
                _ => exit::DATA,
            };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return exit::CONFIG;
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
    }
    exit::INTERNAL
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = configure_threads(cli.threads).and_then(|_| dispatch(cli.command));
    match result {
        Ok(m) => {
            log::info!("outputs in {}", outputs_dir(&m).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn outputs_dir(m: &RunManifest) -> &Path {
    m.config
        .get("out")
        .and_then(|v| v.as_str())
        .map(Path::new)
        .unwrap_or(Path::new("."))
}
