//! Control function correction (CFC) for position bias in learning to rank.
//!
//! The crate is organised around the two-stage procedure:
//!
//! 1. [`clicks`] produces logged rankings with an initial linear ranker and
//!    simulates position-biased clicks on them.
//! 2. [`control`] fits a first-stage model of the logged positions and
//!    extracts its residuals.
//! 3. [`transforms`] maps residuals onto one of four control signals.
//! 4. [`gbdt`] trains a LambdaMART ranker on clicks with the control signal as
//!    an extra input, which is zeroed at inference.
//! 5. [`pipeline`] selects the transform and boosting parameters on
//!    validation data (optionally with debiased clicks) and runs experiment
//!    sweeps, scored with [`metrics`].

pub mod clicks;
pub mod control;
pub mod data;
pub mod gbdt;
pub mod metrics;
pub mod pipeline;
pub mod stats;
pub mod transforms;
mod util;

pub use util::derive_seed;

pub use clicks::{ClickLog, LinearRanker, RankedLists, SimConfig};
pub use control::{FirstStageKind, FirstStageModel, ResidualSet};
pub use data::{Dataset, DocId, Document, FeatureStats, Query};
pub use gbdt::{RankerEnsemble, TrainParams};
pub use metrics::{EvalReport, MetricConfig};
pub use transforms::{ControlSignals, FittedTransform, TransformKind};
