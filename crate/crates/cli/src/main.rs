//! `orthrus`: pretrain, distill, generate, bench and ablate from the command line.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orthrus_core::inference::DecodeMode;
use orthrus_core::OrthrusError;

use commands::AblationKind;
use config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] OrthrusError),
    /// Missing or unreadable input file.
    #[error("{0}")]
    Input(String),
}

impl CliError {
    fn config(origin: &str, message: impl Into<String>) -> Self {
        Self::Config(ConfigError {
            origin: origin.into(),
            message: message.into(),
        })
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Runtime(OrthrusError::Config(_)) => 2,
            Self::Runtime(_) | Self::Input(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "orthrus", version, about = "Dual-view transformer: training, lossless parallel decoding, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat key=value file).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random stream (data, training, sampling).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long = "max-new")]
    max_new: Option<usize>,
    /// Inference block size.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Orthrus,
    Ar,
    Multistep,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Orthrus => DecodeMode::Orthrus,
            ModeArg::Ar => DecodeMode::Ar,
            ModeArg::Multistep => DecodeMode::Multistep,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoregressive backbone and write a sealed checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (defaults to `<out>.metrics.jsonl`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the diffusion view on top of a sealed backbone.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode every line of a prompt file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_enum, default_value = "orthrus")]
        mode: ModeArg,
        /// Output file (defaults to standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a prompt suite with the AR baseline and each block size.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Comma-separated block sizes to sweep.
        #[arg(long = "k-sweep", value_delimiter = ',')]
        k_sweep: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare objectives, block sizes or single/multi-step drafting.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long, value_enum)]
        kind: AblationKind,
        /// Backbone for objective/multistep, trained checkpoint for block-size.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long = "k-sweep", value_delimiter = ',')]
        k_sweep: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Resolve the run config. The flag reports whether any `model.*` key was
/// set explicitly.
fn resolve(common: &Common, decode: Option<&DecodeFlags>) -> Result<(RunConfig, bool), CliError> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    run.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        run.set_seed(seed);
    }
    if let Some(d) = decode {
        if let Some(t) = d.temperature {
            run.decode.temperature = t;
        }
        if let Some(n) = d.max_new {
            run.decode.max_new_tokens = n;
        }
        if d.k.is_some() {
            run.decode.k = d.k;
        }
    }
    run.validate()?;
    let explicit_model = run.model != orthrus_core::model::ModelConfig::default();
    Ok((run, explicit_model))
}

fn sweep(run: &mut RunConfig, ks: &[usize]) {
    if !ks.is_empty() {
        run.bench.k_values = ks.to_vec();
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common, out, metrics } => {
            let (run, _) = resolve(&common, None)?;
            commands::pretrain(&run, &out, metrics)
        }
        Command::Distill {
            common,
            backbone,
            out,
            metrics,
        } => {
            let (mut run, explicit) = resolve(&common, None)?;
            commands::distill_cmd(&mut run, explicit, &backbone, &out, metrics)
        }
        Command::Generate {
            common,
            decode,
            checkpoint,
            prompts,
            mode,
            out,
        } => {
            let (mut run, explicit) = resolve(&common, Some(&decode))?;
            commands::generate_cmd(&mut run, explicit, &checkpoint, &prompts, mode.into(), out.as_deref())
        }
        Command::Bench {
            common,
            decode,
            checkpoint,
            prompts,
            k_sweep,
            out,
        } => {
            let (mut run, explicit) = resolve(&common, Some(&decode))?;
            sweep(&mut run, &k_sweep);
            commands::bench_cmd(&mut run, explicit, &checkpoint, &prompts, &out)
        }
        Command::Ablate {
            common,
            decode,
            kind,
            checkpoint,
            prompts,
            k_sweep,
            out,
        } => {
            let (mut run, explicit) = resolve(&common, Some(&decode))?;
            sweep(&mut run, &k_sweep);
            commands::ablate_cmd(&mut run, explicit, kind, &checkpoint, &prompts, Path::new(&out))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
