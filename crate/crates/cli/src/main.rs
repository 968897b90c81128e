//! `bbscale`: batch front end for the Bayesian-bootstrap engines.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial results.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use bbscale::engines::Method;
use bbscale::functionals::MixedWeightMatrix;

mod commands;
mod config;

use commands::Outcome;
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "bbscale", version, about = "Scalable Bayesian-bootstrap posterior sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured engine(s) on a CSV dataset.
    Run(RunArgs),
    /// Run a simulation plan and write table1.csv plus traces.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Errors of summary records against a reference summary.
    Compare {
        #[arg(long)]
        reference: PathBuf,
        /// Summary JSON files to score.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Directory for errors.csv (CSV goes to stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Wall-clock budget in seconds per engine.
    #[arg(long)]
    time_budget: Option<f64>,
    /// `inverse` or `literal`.
    #[arg(long)]
    mixed_weight_matrix: Option<MixedWeightMatrix>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_logging(verbosity: Option<&str>) {
    let mut b =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(verbosity.unwrap_or("warn")));
    b.format_timestamp(None);
    let _ = b.try_init();
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(w) => bbscale::exec::with_workers(w, f),
        None => f(),
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Run(a) => {
            let ov = Overrides {
                method: a.method,
                gamma: a.gamma,
                b: a.b,
                r: a.r,
                s: a.s,
                seed: a.seed,
                workers: a.workers,
                time_budget: a.time_budget,
                mixed_weight_matrix: a.mixed_weight_matrix,
                out: a.out,
            };
            let cfg = RunConfig::load(&a.config, &ov)?;
            init_logging(cfg.output.verbosity.as_deref());
            with_workers(cfg.output.workers, || commands::cmd_run(&a.config, &cfg))
        }
        Command::Simulate {
            config,
            seed,
            workers,
            out,
        } => {
            init_logging(None);
            with_workers(workers, || commands::cmd_simulate(&config, seed, out))
        }
        Command::Compare {
            reference,
            summaries,
            out,
        } => {
            init_logging(None);
            commands::cmd_compare(&reference, &summaries, out)
        }
    }
}

fn main() -> ExitCode {
    // clap would exit with 2 on usage errors, which means "partial" here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
