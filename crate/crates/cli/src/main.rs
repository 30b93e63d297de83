use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resnet_mg::train::TrainMode;
use resnet_mg_cli::{run, CliError, ExperimentConfig, ExperimentKind, Overrides};

#[derive(Parser)]
#[command(name = "resnet-mg", version, about = "Multigrid forward propagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Residual histories for several depths.
    Converge(Flags),
    /// Multigrid states against sequential propagation over many seeds.
    OracleCheck(Flags),
    /// One MNIST training run.
    Train(Flags),
    /// Wall-clock and state checksum per worker count.
    Scale(Flags),
}

#[derive(Args)]
struct Flags {
    /// Experiment file (TOML); flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated worker counts.
    #[arg(long, value_delimiter = ',')]
    workers: Option<Vec<usize>>,
    /// Comma-separated layer counts.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// Cycle cap: max_cycles for solves, mg_cycles for training.
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    tol: Option<f64>,
    /// Training forward mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "mg" => Ok(TrainMode::Mg),
        "exact" => Ok(TrainMode::Exact),
        _ => Err(format!("expected 'mg' or 'exact', got '{s}'")),
    }
}

fn execute(kind: ExperimentKind, flags: Flags) -> Result<bool, CliError> {
    let base = match &flags.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        out: flags.out,
        seed: flags.seed,
        workers: flags.workers,
        depths: flags.depths,
        cycles: flags.cycles,
        tol: flags.tol,
        mode: flags.mode,
    };
    let cfg = base.resolve(kind, &overrides)?;
    let outcome = run(&cfg)?;
    for line in &outcome.summary {
        eprintln!("{line}");
    }
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, flags) = match cli.command {
        Command::Converge(f) => (ExperimentKind::Converge, f),
        Command::OracleCheck(f) => (ExperimentKind::OracleCheck, f),
        Command::Train(f) => (ExperimentKind::Train, f),
        Command::Scale(f) => (ExperimentKind::Scale, f),
    };
    match execute(kind, flags) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{kind}: FAILED");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{kind}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
