//! Experiment harness: runs seeded multi-run experiments from a JSON
//! config and writes tidy CSV outputs.

pub mod config;
pub mod experiment;
pub mod metrics;

pub use config::{ExperimentConfig, PreprocessConfig, Problem};
pub use experiment::{analyze, attack, preprocess, run_experiment, AnalysisSummary, AttackSummary, PreprocessReport, RunSummary};
pub use metrics::{aggregate_runs, average_loss, Aggregate, MetricRow};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] madmm_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Short machine-readable name of the failure.
    pub fn kind(&self) -> String {
        match self {
            HarnessError::Core(e) => {
                let debug = format!("{e:?}");
                debug.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Core").to_string()
            }
            HarnessError::Config(_) => "InvalidConfig".into(),
            HarnessError::Threads(_) => "ThreadPool".into(),
            HarnessError::Io(_) => "Io".into(),
            HarnessError::Json(_) => "Json".into(),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
