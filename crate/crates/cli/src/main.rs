//! `multiscale`: command-line driver for slow-fast averaging experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slowfast_core::harness::{
    parse_config, run_audit, run_average, run_converge, run_invariant, run_simulate, LoadedConfig, RunReport,
};
use slowfast_core::Error;

#[derive(Parser, Debug)]
#[command(name = "multiscale", version, about = "Monte Carlo experiments for slow-fast stochastic reaction-diffusion systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, value_name = "K", env = "MULTISCALE_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coupled ensemble at one ε: trajectory dumps and a summary of functionals.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scale separation; overrides the model's ε.
        #[arg(long, value_name = "VALUE")]
        eps: Option<f64>,
    },
    /// Stationary averages of the frozen fast equation at x = u0.
    Invariant {
        #[command(flatten)]
        common: Common,
    },
    /// Averaged drift at x = u0 with the closed form when available.
    Average {
        #[command(flatten)]
        common: Common,
    },
    /// Discrepancy functional and weak errors over the ε grid.
    Converge {
        #[command(flatten)]
        common: Common,
    },
    /// Moment audit, Hölder increments and θ-stability.
    Audit {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, eps: Option<f64>) -> slowfast_core::Result<LoadedConfig> {
    let mut loaded = parse_config(&common.config)?;
    let cfg = &mut loaded.config;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(w) = common.workers {
        cfg.worker_count = w;
    }
    if let Some(eps) = eps {
        cfg.model.epsilon = eps;
    }
    loaded.model = cfg.validate()?;
    Ok(loaded)
}

fn run(cli: Cli) -> slowfast_core::Result<RunReport> {
    match cli.command {
        Command::Simulate { common, eps } => run_simulate(&load(&common, eps)?),
        Command::Invariant { common } => run_invariant(&load(&common, None)?),
        Command::Average { common } => run_average(&load(&common, None)?),
        Command::Converge { common } => run_converge(&load(&common, None)?),
        Command::Audit { common } => run_audit(&load(&common, None)?),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::HypothesisViolated { .. } | Error::InvalidParameter(_) => 2,
        Error::ExcessiveCensoring { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("multiscale: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
