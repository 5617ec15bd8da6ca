//! The end-to-end procedure: debiasing of validation clicks, selection of
//! the transform and boosting parameters, and experiment sweeps.

pub mod debias;
pub mod experiment;
pub mod tune;

use thiserror::Error;

use crate::clicks::ClickError;
use crate::control::ControlError;
use crate::data::DataError;
use crate::gbdt::GbdtError;
use crate::metrics::MetricError;
use crate::transforms::TransformError;

pub use debias::{debias_validation_clicks, DebiasModel, ProxyRelevance, DEFAULT_DEBIAS_LAMBDA};
pub use experiment::{run_experiment, run_single, ExperimentConfig, ExperimentReport, RunResult, SweepAxis};
pub use tune::{
    train_grid, tune_and_train, tune_baseline, validation_ndcg, ConfigResult, SplitInputs, TrainedGrid, TuneGrid,
    TuneInputs, TuneOutcome, ValidationMode, VALIDATION_CUTOFF,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("inputs do not cover the dataset: {0}")]
    Coverage(String),
    #[error("every configuration failed: {0}")]
    AllConfigsFailed(String),
    #[error("unknown sweep axis {0:?} (expected eta, passes, noise, valid-queries or first-stage-kind)")]
    UnknownAxis(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Clicks(#[from] ClickError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
