//! Experiment harness: episodes, meta-training, baseline search, evaluation
//! protocol, metrics files and the command-line front end.

pub mod cli;
pub mod config;
pub mod episode;
pub mod meta;
pub mod metrics;
pub mod protocol;
pub mod stats;

use std::path::PathBuf;

use thiserror::Error;

use crate::controller::ControllerError;
use crate::data::DataError;
use crate::observe::ObserveError;
use crate::schedules::ScheduleError;
use crate::trainee::TraineeError;

pub use config::{EpisodeConfig, ExperimentConfig, MetaConfig};
pub use episode::{run_episode, EpisodeOutcome, EpisodeSeeds, LrSource, Task};
pub use meta::{train_controller, EpisodeSummary, MetaOutcome};
pub use metrics::MetricsRecord;
pub use protocol::{evaluate_controller, evaluate_schedule, run_baseline_protocol, BaselineOutcome};
pub use stats::{t_test, RunSummary, SeedResult, TTest};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Trainee(#[from] TraineeError),
    #[error(transparent)]
    Observe(#[from] ObserveError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("every grid schedule diverged")]
    AllDiverged,
    #[error("statistics: {0}")]
    Stats(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
