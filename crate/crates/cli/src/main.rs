mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::error::CliError;

/// Optimize mixed p-spin Hamiltonians by incremental message passing.
///
/// Exit codes: 0 success, 2 invalid input, 3 numeric failure or failed
/// check, 4 resource refusal.
#[derive(Parser)]
#[command(name = "pspin", version)]
struct Cli {
    /// Print the result as one JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Cap on worker threads.
    #[arg(long, global = true, env = "PSPIN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, env = "PSPIN_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Minimize the Parisi functional; writes gamma.csv and report.json.
    SolveGamma(Common),
    /// Full pipeline: gamma, calibration, disorder, iterations, rounding.
    Run {
        #[command(flatten)]
        common: Common,
        /// Validate and print the plan without sampling anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Compare an iteration against state evolution; fails on the norm law.
    SeCheck(Common),
    /// Check the PDE solver against closed forms and invariants.
    PdeCheck(Common),
    /// Exact optimum by enumeration over small instances.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Instance size (overrides `oracle.n`).
        #[arg(long)]
        n: Option<usize>,
        /// Also run the algorithm on each instance and report the ratio.
        #[arg(long)]
        alg: bool,
    },
    /// Time the main kernels at the configured size.
    Bench(Common),
}

fn execute(cli: Cli) -> Result<Value, CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::resource(format!("thread pool: {e}")))?;
    }
    let load = |c: Common| commands::load(c.config.as_deref(), c.out);
    match cli.command {
        Command::SolveGamma(c) => commands::solve_gamma(&load(c)?),
        Command::Run { common, dry_run } => {
            let r = load(common)?;
            if dry_run {
                Ok(commands::plan(&r))
            } else {
                commands::run(&r)
            }
        }
        Command::SeCheck(c) => commands::se_check_cmd(&load(c)?),
        Command::PdeCheck(c) => commands::pde_check(&load(c)?),
        Command::Oracle { common, n, alg } => commands::oracle(&load(common)?, n, alg),
        Command::Bench(c) => commands::bench(&load(c)?),
    }
}

fn print_human(v: &Value) {
    if let Value::Object(map) = v {
        for (k, val) in map {
            match val {
                Value::Array(_) | Value::Object(_) => println!("{k}: {}", serde_json::to_string_pretty(val).unwrap_or_default()),
                Value::String(s) => println!("{k}: {s}"),
                other => println!("{k}: {other}"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match execute(cli) {
        Ok(v) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            } else {
                print_human(&v);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if json {
                println!("{}", serde_json::json!({"error": e.message, "stage": e.stage, "exit_code": e.code}));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
