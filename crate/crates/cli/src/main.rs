//! `furcanet`: generate corpora, train, separate and evaluate.
//!
//! The `--config` file for `train` is TOML with optional `[model]` and
//! `[train]` tables whose keys are the `ModelConfig` and `TrainConfig` field
//! names; anything omitted keeps its default.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use furcanet::corpus::{self, CorpusConfig, Split};
use furcanet::evaluate::{evaluate, EvalOptions, Separator};
use furcanet::model::{FurcaNetModel, ModelConfig};
use furcanet::par::Execution;
use furcanet::signal;
use furcanet::training::{self, CheckpointPolicy, TrainConfig};

#[derive(Parser)]
#[command(
    name = "furcanet",
    version,
    about = "Time-domain monaural speech separation"
)]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixture corpus.
    Mix(MixArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Separate one WAV file.
    Separate(SeparateArgs),
    /// Score a model (or the identity baseline) on a corpus.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    num: usize,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    /// Seconds per example.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    snr_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    snr_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = signal::DEFAULT_SAMPLE_RATE)]
    sample_rate: u32,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Let speakers share frequency bands instead of giving each its own.
    #[arg(long)]
    overlapping_bands: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Development manifest.
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides both the initialization and the shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate.
    #[arg(
        long,
        required_unless_present = "identity",
        conflicts_with = "identity"
    )]
    model: Option<PathBuf>,
    /// Score the identity separator (every output is the mixture).
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    with_irm_oracle: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Mix(m) = &cli.command {
        if m.snr_min > m.snr_max {
            Cli::command()
                .error(
                    ErrorKind::ArgumentConflict,
                    format!(
                        "--snr-min ({}) must not exceed --snr-max ({})",
                        m.snr_min, m.snr_max
                    ),
                )
                .exit();
        }
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let result = match cli.command {
        Command::Mix(a) => cmd_mix(a, exec),
        Command::Train(a) => cmd_train(a, exec),
        Command::Separate(a) => cmd_separate(a),
        Command::Evaluate(a) => cmd_evaluate(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_mix(a: MixArgs, exec: Execution) -> Result<()> {
    let cfg = CorpusConfig {
        split: a.split,
        num_examples: a.num,
        num_sources: a.sources,
        duration_s: a.duration,
        snr_min_db: a.snr_min,
        snr_max_db: a.snr_max,
        seed: a.seed,
        sample_rate_hz: a.sample_rate,
        band_separable: !a.overlapping_bands,
    };
    let manifest = corpus::generate_corpus(&cfg, &a.out, exec)?;
    println!("{}", manifest.path.display());
    Ok(())
}

fn load_set(path: &Path, what: &str) -> Result<Vec<corpus::MixtureExample>> {
    corpus::load_corpus(path).with_context(|| format!("loading {what} corpus {}", path.display()))
}

fn cmd_train(a: TrainArgs, exec: Execution) -> Result<()> {
    let mut run = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(epochs) = a.epochs {
        run.train.max_epochs = epochs;
    }
    if let Some(seed) = a.seed {
        run.model.seed = seed;
        run.train.seed = seed;
    }
    run.train.execution = exec;
    run.model.validate()?;
    run.train.validate()?;

    let manifest = corpus::Manifest::read(&a.data)?;
    if manifest.header.num_sources != run.model.num_sources {
        bail!(
            "corpus {} has {} sources per example but the model separates {}",
            a.data.display(),
            manifest.header.num_sources,
            run.model.num_sources
        );
    }
    let train_set = load_set(&a.data, "training")?;
    let dev_set = load_set(&a.dev, "dev")?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let resolved = toml::to_string(&run).context("serializing config")?;
    std::fs::write(a.out.join("config.toml"), resolved)?;
    let best = a.out.join("best.ckpt");
    let policy = CheckpointPolicy {
        best_path: Some(best.clone()),
    };
    let (_, report) = training::train(&run.model, &train_set, &dev_set, &run.train, &policy)?;
    let log_path = a.out.join("train_log.jsonl");
    report.write_jsonl(&log_path)?;
    println!("{}", best.display());
    Ok(())
}

fn cmd_separate(a: SeparateArgs) -> Result<()> {
    let model =
        FurcaNetModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mixture = signal::read_wav(&a.input)?;
    let stem = a
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .context("input path has no file name")?;
    let outputs = model.separate(&mixture)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (s, w) in outputs.iter().enumerate() {
        let path = a.out.join(format!("{stem}.s{}.wav", s + 1));
        let clipped = signal::write_wav(w, &path)?;
        if clipped > 0 {
            log::warn!("{}: {clipped} samples clipped", path.display());
        }
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, exec: Execution) -> Result<()> {
    let examples = load_set(&a.data, "evaluation")?;
    let opts = EvalOptions {
        with_irm_oracle: a.with_irm_oracle,
        execution: exec,
        ..EvalOptions::default()
    };
    let model;
    let separator = match &a.model {
        Some(path) => {
            model =
                FurcaNetModel::load(path).with_context(|| format!("loading {}", path.display()))?;
            Separator::Model(&model)
        }
        None => Separator::Identity {
            num_sources: examples.first().map_or(2, |e| e.sources.len()),
        },
    };
    let report = evaluate(separator, &examples, &opts)?;
    report.write_json(&a.report)?;
    println!(
        "mean SDRi {:.3} dB over {} examples",
        report.mean_sdri_db, report.num_examples
    );
    if let Some(oracle) = &report.oracle {
        println!("IRM oracle mean SDRi {:.3} dB", oracle.mean_sdri_db);
    }
    Ok(())
}
