//! Command-line driver for pretraining the toy model, quantizing it with one
//! method, running the full method matrix, and inspecting or folding
//! checkpoints.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU8, Ordering};

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliResult;

static VERBOSITY: AtomicU8 = AtomicU8::new(1);

pub fn verbosity() -> u8 {
    VERBOSITY.load(Ordering::Relaxed)
}

#[macro_export]
macro_rules! info {
    ($($t:tt)*) => { if $crate::verbosity() >= 1 { eprintln!($($t)*) } };
}

#[macro_export]
macro_rules! detail {
    ($($t:tt)*) => { if $crate::verbosity() >= 2 { eprintln!($($t)*) } };
}

#[derive(Parser)]
#[command(name = "quadapter", version, about = "Quantization adapters for a toy transformer")]
struct Cli {
    /// More progress output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run config (TOML), or a manifest from an earlier run.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides QUADAPTER_OUT and the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the FP model on all corpora and apply the outlier surgery.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Quantize an FP checkpoint with one method and evaluate it.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the method in the config.
        #[arg(short, long)]
        method: Option<String>,
    },
    /// Run every method against every fine-tuning corpus and print the verdict.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Start from this FP checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-channel min/max at one activation site, as CSV.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        site: String,
        /// Corpus whose test split is streamed (default: the first).
        #[arg(long)]
        corpus: Option<String>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fold the adapter scales into the weights, after a bit-exact self-check.
    Fold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Destination checkpoint (default: <out>/<name>-folded.ckpt).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn out_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    match (flag, std::env::var_os("QUADAPTER_OUT")) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(env)) => PathBuf::from(env),
        (None, None) => cfg.out_dir.clone(),
    }
}

fn setup(common: &Common, method: Option<&str>) -> CliResult<(RunConfig, PathBuf)> {
    let (cfg, base) = RunConfig::load(&common.config)?;
    let cfg = cfg.finish(&base, common.seed, method)?;
    let out = out_dir(&cfg, common.out.as_deref());
    Ok((cfg, out))
}

/// Like [`setup`], for commands that write into the output directory.
fn setup_writing(common: &Common, method: Option<&str>) -> CliResult<(RunConfig, PathBuf)> {
    let (cfg, out) = setup(common, method)?;
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let (cfg, out) = setup_writing(&common, None)?;
            commands::pretrain_cmd(&cfg, &out)
        }
        Command::Quantize { common, checkpoint, method } => {
            let (cfg, out) = setup_writing(&common, method.as_deref())?;
            commands::quantize_cmd(&cfg, &checkpoint, &out)
        }
        Command::Experiment { common, checkpoint } => {
            let (cfg, out) = setup_writing(&common, None)?;
            commands::experiment_cmd(&cfg, checkpoint.as_deref(), &out)
        }
        Command::Inspect { common, checkpoint, site, corpus, csv } => {
            let (cfg, _) = setup(&common, None)?;
            commands::inspect_cmd(&cfg, &checkpoint, &site, corpus.as_deref(), csv.as_deref())
        }
        Command::Fold { common, checkpoint, dest } => {
            let (cfg, out) = setup_writing(&common, None)?;
            commands::fold_cmd(&cfg, &checkpoint, dest, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    VERBOSITY.store(if cli.quiet { 0 } else { 1 + cli.verbose }, Ordering::Relaxed);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
