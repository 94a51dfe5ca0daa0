use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use shjb_cli::{emit_report, run_experiment, CliError, Command, ExperimentConfig, THREADS_ENV};

/// Runs a laboratory experiment described by a TOML config.
#[derive(Debug, Parser)]
#[command(name = "shjb", version)]
struct Args {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// One of validate, value, potential, certificate, snell, reflected, pde, verify.
    #[arg(long)]
    command: String,
    /// Output directory; defaults to `output.dir` of the config, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multiplies every verification tolerance.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| CliError::Config {
        field: THREADS_ENV.into(),
        message: format!("expected a positive integer, got `{raw}`"),
    })?;
    // Only fails if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(args: &Args) -> Result<bool, CliError> {
    init_threads()?;
    let command: Command = args.command.parse()?;
    let cfg = ExperimentConfig::from_path(&args.config)?;
    let outcome = run_experiment(&cfg, command, args.tolerance_scale)?;
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let written = emit_report(&outcome.tables, &dir)?;
    // A closed stdout (for example `| head`) must not abort the run.
    let mut out = std::io::stdout().lock();
    for line in &outcome.summary {
        let _ = writeln!(out, "{line}");
    }
    for path in written {
        let _ = writeln!(out, "wrote {}", path.display());
    }
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("shjb: some checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("shjb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
