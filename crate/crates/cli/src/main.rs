use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowrde::config::{RunConfig, SEED_ENV};
use flowrde::error::{CliError, Result};
use flowrde::run::{cmd_counterterm, cmd_sample, cmd_solve, cmd_trees, CountertermInputs};
use flowrde::suites::{run_suite, Suite, SuiteOptions};

/// Numerical solver and verification harness for rough differential
/// equations driven by mollified fractional Brownian motion.
#[derive(Parser)]
#[command(name = "flowrde", version)]
struct Cli {
    /// Worker threads for seed-parallel work (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one path and compare against the direct integrator.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for u.csv, oracle.csv and report.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a verification suite and print one PASS/FAIL line per check.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        /// Run configuration supplying field, u0, amplitude and solver (holder, eps).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of seeds, counted from 0.
        #[arg(long)]
        seeds: Option<usize>,
        /// Restrict to a single Hurst index.
        #[arg(long)]
        hurst: Option<f64>,
        /// Grid level (forces, eps) or fine level (holder).
        #[arg(long)]
        level: Option<u32>,
        /// Directory for summary.json and points.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the truncation set, its grafting closure and the Ind tables.
    Trees {
        #[arg(long, default_value_t = 0.4)]
        hurst: f64,
    },
    /// Sample the noise of the first seed and write it as CSV.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sample.csv")]
        out: PathBuf,
    },
    /// Evaluate the counterterm at the given root times.
    Counterterm {
        #[arg(long)]
        hurst: f64,
        #[arg(long)]
        eps: f64,
        /// Root times, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        s: Vec<f64>,
    },
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.parse().map(Some).map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Solve { config, out } => {
            let cfg = RunConfig::load(&config)?.resolve()?;
            let summary = cmd_solve(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Verify { suite, config, seeds, hurst, level, out } => {
            let config = config.map(|p| RunConfig::load(&p).and_then(RunConfig::resolve)).transpose()?;
            let opts = SuiteOptions { seeds, seed: seed_from_env()?, hurst, level, config };
            let (params, report) = run_suite(suite, &opts)?;
            print!("{}", report.table());
            if let Some(dir) = out {
                report.write(&dir, &params)?;
            }
            return Ok(report.passed());
        }
        Command::Trees { hurst } => print!("{}", cmd_trees(hurst)?),
        Command::Sample { config, out } => cmd_sample(&RunConfig::load(&config)?.resolve()?, &out)?,
        Command::Counterterm { hurst, eps, s } => print!("{}", cmd_counterterm(&CountertermInputs { hurst, eps, s })?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
