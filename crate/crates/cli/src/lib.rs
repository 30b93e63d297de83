//! Experiment driver: convergence histories, oracle checks, training runs
//! and worker scaling, each written as CSV.

pub mod commands;
pub mod config;

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

pub use commands::{cmd_converge, cmd_oracle_check, cmd_scale, cmd_train, Outcome};
pub use config::{ExperimentConfig, ExperimentKind, Overrides};

#[derive(Debug, PartialEq)]
pub enum CliError {
    /// Bad configuration, unreadable or malformed input. Exit code 2.
    Config(String),
    /// A run that could not complete. Exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<resnet_mg::Error> for CliError {
    fn from(e: resnet_mg::Error) -> Self {
        use resnet_mg::Error as E;
        match e {
            E::Config(m) => Self::Config(m),
            E::Parse { .. } | E::File { .. } | E::Dimension(_) | E::Input(_) => {
                Self::Config(e.to_string())
            }
            E::Protocol(_) | E::Execution(_) | E::Io(_) => Self::Failed(e.to_string()),
        }
    }
}

/// Runs one experiment and writes its CSV to `cfg.out` (stdout if unset).
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let outcome = match cfg.kind() {
        ExperimentKind::Converge => cmd_converge(cfg)?,
        ExperimentKind::OracleCheck => cmd_oracle_check(cfg)?,
        ExperimentKind::Train => cmd_train(cfg)?,
        ExperimentKind::Scale => cmd_scale(cfg)?,
    };
    write_output(cfg.out.as_deref(), &outcome.csv)?;
    Ok(outcome)
}

fn write_output(path: Option<&Path>, csv: &str) -> Result<(), CliError> {
    let result = match path {
        Some(p) => fs::write(p, csv).map_err(|e| (p.display().to_string(), e)),
        None => io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| ("stdout".to_string(), e)),
    };
    result.map_err(|(what, e)| CliError::Failed(format!("writing {what}: {e}")))
}
