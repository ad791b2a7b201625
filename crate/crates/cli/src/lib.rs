//! Driver for the `latentmoe` command: equivalence suite, traffic sweeps,
//! toy training and report merging. Every verb writes a bundle directory of
//! CSVs tagged with the config hash plus a `manifest.json`.

pub mod bundle;
pub mod cli;
pub mod config;
pub mod report;
pub mod svg;
pub mod sweep;
pub mod train;
pub mod verify;

use std::process::ExitCode;

pub use bundle::Bundle;
pub use config::RunConfig;

/// Environment variable naming the root directory for bundles.
pub const OUTPUT_ROOT_ENV: &str = "LATENTMOE_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration or inputs; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// A check did not hold; exit code 1.
    #[error("assertion failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Failed(_) => ExitCode::from(1),
            CliError::Config(_) | CliError::Io(_) => ExitCode::from(2),
        }
    }
}

impl From<latentmoe::Error> for CliError {
    fn from(e: latentmoe::Error) -> Self {
        match e {
            latentmoe::Error::Diverged { .. } => CliError::Failed(e.to_string()),
            latentmoe::Error::Io(io) => CliError::Io(io),
            latentmoe::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Outcome of one named check inside a verb.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub module: String,
    pub name: String,
    pub seed: u64,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `max_error <= tolerance`.
    pub fn within(module: &str, name: &str, seed: u64, max_error: f64, tolerance: f64) -> Self {
        Check {
            module: module.into(),
            name: name.into(),
            seed,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }

    /// A yes/no property; the error column holds 0 or 1.
    pub fn holds(module: &str, name: &str, seed: u64, ok: bool) -> Self {
        Check { module: module.into(), name: name.into(), seed, max_error: if ok { 0.0 } else { 1.0 }, tolerance: 0.0, passed: ok }
    }

    pub fn row(&self) -> Vec<String> {
        vec![
            self.module.clone(),
            self.name.clone(),
            self.seed.to_string(),
            format!("{:e}", self.max_error),
            format!("{:e}", self.tolerance),
            if self.passed { "pass" } else { "fail" }.to_string(),
        ]
    }
}

pub const CHECK_HEADER: [&str; 6] = ["module", "check", "seed", "max_error", "tolerance", "status"];

/// Writes `checks.csv` and `failures.csv`, prints one line per check and
/// turns any failure into [`CliError::Failed`].
pub fn finish_checks(bundle: &mut Bundle, checks: &[Check], stem: &str) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = checks.iter().map(Check::row).collect();
    bundle.write_csv(&format!("{stem}.csv"), &CHECK_HEADER, &rows)?;
    let failed: Vec<Vec<String>> = checks.iter().filter(|c| !c.passed).map(Check::row).collect();
    bundle.write_csv("failures.csv", &CHECK_HEADER, &failed)?;
    for c in checks {
        println!(
            "{} {}/{} seed={} max_error={:e} tol={:e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.module,
            c.name,
            c.seed,
            c.max_error,
            c.tolerance
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} of {} checks failed", failed.len(), checks.len())))
    }
}
