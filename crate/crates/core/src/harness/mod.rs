//! Simulation-study machinery: configuration, the replication runner,
//! performance metrics, truth caching, bootstrap intervals and reports.

mod bootstrap;
mod config;
mod estimate;
mod metrics;
mod report;
mod runner;
mod truth;

use std::path::PathBuf;

use thiserror::Error;

pub use bootstrap::{bootstrap_ci, bootstrap_with, BootstrapCi};
pub use config::{ExperimentConfig, Method, WORKERS_ENV};
pub use estimate::{estimate_curve, EstimateError, EstimateOptions};
pub use metrics::{summarize, Summary};
pub use report::{emit_report, read_results, write_results, ResultRow};
pub use runner::{run_experiment, run_experiment_with_truth};
pub use truth::{cached_truth, truth_path};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least 2 estimates, got {0}")]
    TooFewEstimates(usize),
    #[error("{failed} of {total} bootstrap resamples failed")]
    BootstrapUnstable { failed: usize, total: usize },
    #[error("bootstrap needs at least 100 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("confidence level {0} must lie in (0, 1)")]
    InvalidLevel(f64),
    #[error("no result rows to report")]
    EmptyResults,
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Dgm(#[from] crate::dgm::DgmError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Csv { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Json { path, source }
    }
}
