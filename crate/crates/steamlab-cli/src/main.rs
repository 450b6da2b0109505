//! Command-line front end for the knowledge-editing laboratory: train a small
//! model on a synthetic fact corpus, apply rank-one knowledge edits with or
//! without latent alignment, and score or visualize the results.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::LabConfig;
use pipeline::{EditVariant, OutDir};
use steamlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "steamlab",
    version,
    about = "train, edit, and evaluate a desk-scale knowledge-editing model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file: `key = value` lines under [section] headers.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed; every random choice in the run derives from it.
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Directory for artifacts (corpus, checkpoints, records, reports).
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Worker threads; falls back to STEAMLAB_THREADS, then 1.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fact corpus and train the base model on it.
    Train(Common),

    /// Apply rank-one knowledge edits to the trained model.
    Edit {
        #[command(flatten)]
        common: Common,

        /// baseline: plain rank-one edits; steam: adds latent alignment.
        #[arg(long, value_enum, default_value_t = EditVariant::Steam)]
        variant: EditVariant,

        /// Alignment weight override (baseline pins it to 0).
        #[arg(long)]
        lambda: Option<f64>,

        /// How many cases to edit sequentially into one checkpoint.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },

    /// Score the edited model on its edit cases.
    Eval(Common),

    /// Export lens curves, projections, and anchor cosines as CSV.
    Analyze(Common),

    /// Evaluate a grid of lambda and band combinations, one row each.
    Sweep {
        #[command(flatten)]
        common: Common,

        /// Cases per combination (default: [sweep] cases).
        #[arg(long)]
        cases: Option<usize>,
    },

    /// Print stored evaluation and sweep results.
    Report(Common),
}

fn threads_from(common: &Common) -> Result<usize> {
    let n = match common.threads {
        Some(n) => n,
        None => match std::env::var("STEAMLAB_THREADS") {
            Ok(v) => v.trim().parse().map_err(|_| {
                Error::Config(format!("STEAMLAB_THREADS = '{}' is not a thread count", v))
            })?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn load_config(common: &Common) -> Result<LabConfig> {
    match &common.config {
        Some(path) => LabConfig::load(path),
        None => Ok(LabConfig::defaults()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            pipeline::cmd_train(&cfg, common.seed, &OutDir::new(&common.out))
        }
        Command::Edit {
            common,
            variant,
            lambda,
            batch,
        } => {
            let cfg = load_config(&common)?;
            let threads = threads_from(&common)?;
            pipeline::cmd_edit(
                &cfg,
                common.seed,
                &OutDir::new(&common.out),
                variant,
                lambda,
                batch,
                threads,
            )
        }
        Command::Eval(common) => {
            load_config(&common)?;
            let threads = threads_from(&common)?;
            pipeline::cmd_eval(common.seed, &OutDir::new(&common.out), threads)
        }
        Command::Analyze(common) => {
            let cfg = load_config(&common)?;
            pipeline::cmd_analyze(&cfg, common.seed, &OutDir::new(&common.out))
        }
        Command::Sweep { common, cases } => {
            let cfg = load_config(&common)?;
            let threads = threads_from(&common)?;
            pipeline::cmd_sweep(&cfg, common.seed, &OutDir::new(&common.out), cases, threads)
        }
        Command::Report(common) => pipeline::cmd_report(&OutDir::new(&common.out)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
