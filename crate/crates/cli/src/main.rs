//! `seqmi`: solver sweeps, GAMP/rBP and ERM experiments, cross-verification.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Ctx, Overrides};
use config::{ExperimentConfig, Invalid};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "seqmi",
    version,
    about = "Sequence multi-index models on Gaussian mixtures: saddle-point solver, GAMP/rBP simulators, ERM lab",
    after_help = "Exit codes: 0 success, 2 validation error (bad config, unknown instance, empty grid), \
                  3 numerical failure or failed verification check.\n\
                  Tables are comma-separated with a leading `# key: value` metadata block."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides `output.dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Replace every seed list in the config by this single seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for sweep points and data-parallel loops.
    #[arg(long, global = true, value_name = "N", env = "SEQMI_WORKERS", default_value_t = 1)]
    workers: usize,

    /// Monte Carlo sample count for solver expectations and test errors.
    #[arg(long, global = true, value_name = "N")]
    mc_samples: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Saddle-point sweep over the alpha/lambda grid, warm-started along alpha.
    SolveSe,
    /// GAMP on generated datasets; writes trajectories next to state evolution.
    RunGamp,
    /// rBP and GAMP on the same datasets.
    RunRbp,
    /// Gradient-descent ERM learning curve over the seed list.
    RunErm,
    /// Solver and ERM learning curves in one table.
    Sweep,
    /// Cross-checks for a model zoo instance; nonzero exit on any failure.
    Verify {
        /// Drop the GAMP memory terms in the runs compared with state evolution.
        #[arg(long)]
        no_onsager: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if cli.workers == 0 {
        return Err(config::invalid("--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global().ok();
    let path = cli.config.ok_or_else(|| config::invalid("--config PATH is required"))?;
    let loaded = ExperimentConfig::load(&path)?;
    let verbosity = loaded.config.output.verbosity.clone();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(verbosity))
        .format_timestamp(None)
        .try_init()
        .ok();
    let ov = Overrides {
        out: cli.out,
        seed: cli.seed,
        mc_samples: cli.mc_samples,
    };
    let ctx = Ctx::new(loaded, &ov)?;
    let written = match cli.command {
        Command::SolveSe => commands::solve_se(&ctx)?,
        Command::RunGamp => commands::run_gamp(&ctx, false)?,
        Command::RunRbp => commands::run_gamp(&ctx, true)?,
        Command::RunErm => commands::run_erm(&ctx)?,
        Command::Sweep => commands::sweep(&ctx)?,
        Command::Verify { no_onsager } => {
            let (path, ok) = commands::verify(&ctx, !no_onsager)?;
            println!("{}", path.display());
            return Ok(ok);
        }
    };
    println!("{}", written.display());
    Ok(true)
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some() || c.downcast_ref::<seqmi::error::Error>().is_some_and(|s| s.is_validation())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { EXIT_VALIDATION } else { EXIT_NUMERICAL })
        }
    }
}
