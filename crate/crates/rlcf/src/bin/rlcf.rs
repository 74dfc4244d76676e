//! Command-line front end: `pretrain`, `genbench`, `run`, `sweep`, `report`.
//!
//! Configuration comes from an optional `key = value` file plus flag-style
//! overrides of the same names, e.g.
//!
//! ```text
//! rlcf run --config run.cfg --steps 5 --lr 0.003
//! rlcf genbench --seed 0 --classes 20 --shift 0.6
//! ```
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rlcf::bench::{cmd_genbench, cmd_pretrain, cmd_report, cmd_sweep, run_experiment, RunConfig};
use rlcf::Error;

#[derive(Parser)]
#[command(
    name = "rlcf",
    about = "Test-time adaptation experiments with scorer-model rewards on a synthetic domain-shift benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build student / scorer / captioner checkpoints from the benchmark.
    Pretrain(CommonArgs),
    /// Generate and write the synthetic benchmark files.
    Genbench(CommonArgs),
    /// Run one experiment: all configured objectives on one sample stream.
    Run(CommonArgs),
    /// Grid sweep over sampling factor / steps / learning rate / objective.
    Sweep(CommonArgs),
    /// Aggregate results into a summary (and optional SVG charts).
    Report(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Key-value config file; every key can also be passed as `--key value`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field overrides: `--seed 0 --steps 3 --lr 7e-3 ...`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut pairs = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected `--key value`, got `{arg}`")))?;
        let value = it
            .next()
            .ok_or_else(|| Error::config(format!("flag `--{key}` is missing its value")))?;
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, Error> {
    let overrides = parse_overrides(&args.overrides)?;
    RunConfig::from_sources(args.config.as_deref(), &overrides)
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = load_config(&args)?;
            let written = cmd_pretrain(&cfg)?;
            for path in written {
                println!("wrote checkpoint {}", path.display());
            }
        }
        Command::Genbench(args) => {
            let cfg = load_config(&args)?;
            let path = cmd_genbench(&cfg)?;
            println!("wrote benchmark {}", path.display());
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let reports = run_experiment(&cfg)?;
            println!(
                "run complete: {} objective rows in {}",
                reports.len(),
                cfg.out_dir.join("results.txt").display()
            );
            let summary = cfg.out_dir.join("summary.txt");
            if let Ok(text) = std::fs::read_to_string(summary) {
                print!("{text}");
            }
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            let path = cmd_sweep(&cfg)?;
            println!("sweep table at {}", path.display());
        }
        Command::Report(args) => {
            let cfg = load_config(&args)?;
            let written = cmd_report(&cfg)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ Error::Config(_)) => {
            eprintln!("config error: {err}");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
