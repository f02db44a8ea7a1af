//! Scenario runner: parses scenario files, runs the selected pipelines and
//! writes deterministic result files.

pub mod emit;
pub mod pipelines;
pub mod scenario;

use std::path::Path;

pub use pipelines::{run, RunSummary};
pub use scenario::{Pipeline, Scenario, PRESETS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("budget exceeded in stage {stage}: {message}")]
    Budget { stage: &'static str, message: String },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn stage(stage: &'static str, e: pszeros::Error) -> Self {
        match e {
            pszeros::Error::Budget { .. } => CliError::Budget {
                stage,
                message: e.to_string(),
            },
            other => CliError::Stage {
                stage,
                message: other.to_string(),
            },
        }
    }

    /// 2 for configuration errors, 3 for budget violations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Budget { .. } => 3,
            _ => 1,
        }
    }
}

/// Runs `scenario` on a dedicated pool of `workers` threads and writes results to `out`.
pub fn run_with_workers(scenario: &Scenario, out: &Path, seed: u64, workers: usize) -> Result<RunSummary, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| run(scenario, out, seed))
}
