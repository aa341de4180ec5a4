mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use commands::{Artifacts, SolverFailure};
use config::{ExperimentConfig, Operation, ValidationError};

#[derive(Parser)]
#[command(name = "gammalim", version, about = "Cell problems, homogenization and relaxation experiments")]
struct Cli {
    /// TOML experiment file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Directory receiving CSV and JSON outputs.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Seed for every randomized step; overrides the config.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one Dirichlet cell problem.
    Cell,
    /// Estimate the homogenized density by periodic cells.
    Homogenize,
    /// Dyadic Vitali envelope of a cube set function.
    Envelope,
    /// Lower and upper derivative of a set function with respect to Lebesgue measure.
    Derivative,
    /// Pointwise density of the limit functional.
    Density,
    /// Integrate the density against an affine field over a cube.
    Relax,
    /// Partition recovery against the integrated density.
    GammaGap,
    /// Run the operation named inside a config file.
    Run {
        /// Config path; `--config` works too.
        path: Option<PathBuf>,
    },
    /// Run a named acceptance suite.
    Verify { suite: String },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return 2;
        }
        if cause.is::<SolverFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<gammalim::Error>() {
            return if e.is_validation() { 2 } else { 3 };
        }
    }
    1
}

fn load(path: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let path = path.ok_or_else(|| ValidationError("no config given; pass --config PATH".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ValidationError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let mut out = Artifacts::new(&cli.out)?;
    let (op, cfg) = match cli.command {
        Command::Verify { suite } => {
            let (lines, passed) = commands::verify(&suite, cli.seed, &mut out)?;
            for l in &lines {
                println!("{l}");
            }
            return Ok(if passed { 0 } else { 1 });
        }
        Command::Run { path } => {
            let cfg = load(path.or(cli.config), cli.seed)?;
            let op = cfg.operation.ok_or_else(|| ValidationError("config has no `operation` key".into()))?;
            (op, cfg)
        }
        other => {
            let op = match other {
                Command::Cell => Operation::Cell,
                Command::Homogenize => Operation::Homogenize,
                Command::Envelope => Operation::Envelope,
                Command::Derivative => Operation::Derivative,
                Command::Density => Operation::Density,
                Command::Relax => Operation::Relax,
                Command::GammaGap => Operation::GammaGap,
                Command::Run { .. } | Command::Verify { .. } => unreachable!(),
            };
            let cfg = load(cli.config, cli.seed)?;
            if let Some(named) = cfg.operation {
                if named != op {
                    return Err(anyhow!(ValidationError(format!("config names operation `{named}` but `{op}` was requested"))));
                }
            }
            (op, cfg)
        }
    };
    let summary = commands::execute(op, &cfg, &mut out)?;
    println!("{summary}");
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
