use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use levy2b::harness::{load_config, run_in_pool, run_suite, threads_from_env, RunOptions, Suite};
use levy2b::Error;

/// Cross-checked solvers for second-order BSDEs with jumps and their PIDEs.
#[derive(Parser)]
#[command(name = "levy2b", version)]
struct Cli {
    /// solve-pide, solve-prob, compare, simulate, fenchel, check-viscosity, dpp-check, minimality or all
    suite: Suite,
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for CSV exports.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn config_error(e: &Error) -> ExitCode {
    match e {
        Error::Config(issues) => {
            for i in issues {
                eprintln!("config error: {i}");
            }
        }
        other => eprintln!("config error: {other}"),
    }
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => return config_error(&e),
    };
    let cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => return config_error(&e),
    };
    let opts = RunOptions {
        seed: cli.seed,
        csv_dir: cli.csv,
    };
    let report = match run_in_pool(threads, || run_suite(&cfg, cli.suite, &opts)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    for line in report.verdict_lines() {
        eprintln!("{line}");
    }
    let json = match report.to_json() {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match &cli.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, json + "\n") {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::from(1);
            }
        }
        None => println!("{json}"),
    }
    ExitCode::from(report.exit_code() as u8)
}
