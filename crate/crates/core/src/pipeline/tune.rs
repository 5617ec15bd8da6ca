//! Selection of the transform and boosting parameters by validation NDCG@10.
//!
//! For a given transform and learning rate the models for every tree count
//! in the grid are prefixes of one ensemble, so each (transform, rate) pair
//! is trained once with the largest tree count and the smaller counts are
//! scored from its prefixes. A trained grid can be scored under each
//! validation mode without retraining.

use std::fmt;
use std::fmt::Write;
use std::str::FromStr;

use rayon::prelude::*;

use super::debias::DebiasModel;
use super::PipelineError;
use crate::clicks::ClickLog;
use crate::control::ResidualSet;
use crate::data::Dataset;
use crate::gbdt::{RankerEnsemble, RankingProblem, TrainParams};
use crate::metrics::{mean_ndcg_with_gains, relevance_gain};
use crate::transforms::{apply_all, apply_fitted, ControlSignals, FittedTransform, TransformKind};

/// Truncation of the validation NDCG used as the tuning loss.
pub const VALIDATION_CUTOFF: usize = 10;

pub const TREE_RANGE: (usize, usize) = (100, 500);
pub const LEARNING_RATE_RANGE: (f64, f64) = (0.05, 0.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValidationMode {
    /// Graded judgements of the validation queries.
    TrueRelevance,
    /// Validation click rates minus their prediction from the control signal.
    DebiasedClicks,
    /// Raw validation click rates.
    BiasedClicks,
}

impl ValidationMode {
    pub const ALL: [ValidationMode; 3] = [
        ValidationMode::TrueRelevance,
        ValidationMode::DebiasedClicks,
        ValidationMode::BiasedClicks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ValidationMode::TrueRelevance => "true-relevance",
            ValidationMode::DebiasedClicks => "debiased-clicks",
            ValidationMode::BiasedClicks => "biased-clicks",
        }
    }
}

impl fmt::Display for ValidationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ValidationMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ValidationMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            PipelineError::Config(format!(
                "unknown validation mode {s:?} (expected true-relevance, debiased-clicks or biased-clicks)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneGrid {
    pub transforms: Vec<TransformKind>,
    pub n_trees: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub validation: ValidationMode,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            transforms: TransformKind::ALL.to_vec(),
            n_trees: vec![100, 200, 300, 400, 500],
            learning_rates: vec![0.05, 0.1],
            validation: ValidationMode::DebiasedClicks,
        }
    }
}

impl TuneGrid {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.transforms.is_empty() || self.n_trees.is_empty() || self.learning_rates.is_empty() {
            return Err(PipelineError::Config("tuning grid has an empty axis".into()));
        }
        if let Some(n) = self.n_trees.iter().find(|&&n| n < TREE_RANGE.0 || n > TREE_RANGE.1) {
            return Err(PipelineError::Config(format!(
                "tree count {n} outside [{}, {}]",
                TREE_RANGE.0, TREE_RANGE.1
            )));
        }
        if let Some(lr) = self
            .learning_rates
            .iter()
            .find(|&&lr| !(LEARNING_RATE_RANGE.0..=LEARNING_RATE_RANGE.1).contains(&lr))
        {
            return Err(PipelineError::Config(format!(
                "learning rate {lr} outside [{}, {}]",
                LEARNING_RATE_RANGE.0, LEARNING_RATE_RANGE.1
            )));
        }
        Ok(())
    }
}

/// One split with its clicks and first-stage residuals.
#[derive(Debug, Clone, Copy)]
pub struct SplitInputs<'a> {
    pub data: &'a Dataset,
    pub clicks: &'a ClickLog,
    pub residuals: &'a ResidualSet,
}

#[derive(Debug, Clone, Copy)]
pub struct TuneInputs<'a> {
    pub train: SplitInputs<'a>,
    pub valid: SplitInputs<'a>,
    /// Tree shape, NDCG cutoff and seed shared by every configuration; the
    /// tree count and learning rate come from the grid.
    pub params: TrainParams,
    pub debias_lambda: f64,
}

/// Validation result of one (control, tree count, learning rate) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigResult {
    /// `None` for the zero control signal of the uncorrected ranker.
    pub transform: Option<TransformKind>,
    pub n_trees: usize,
    pub learning_rate: f64,
    pub validation_ndcg: Result<f64, String>,
}

impl ConfigResult {
    pub fn loss(&self) -> Option<f64> {
        self.validation_ndcg.as_ref().ok().map(|v| -v)
    }
}

fn control_name(t: Option<TransformKind>) -> &'static str {
    t.map_or("none", TransformKind::name)
}

/// Selected model with the full per-configuration report.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub mode: ValidationMode,
    pub best: RankerEnsemble,
    pub best_config: ConfigResult,
    pub fitted: Option<FittedTransform>,
    pub debias: Option<DebiasModel>,
    /// Floor hits of the selected transform on the training residuals.
    pub floor_hits: usize,
    pub report: Vec<ConfigResult>,
}

impl TuneOutcome {
    pub fn validation_loss(&self) -> f64 {
        self.best_config.loss().expect("selected configuration succeeded")
    }

    /// CSV `transform,n_trees,learning_rate,validation,ndcg_at_10,status`.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("transform,n_trees,learning_rate,validation,ndcg_at_10,status\n");
        for r in &self.report {
            let (v, status) = match &r.validation_ndcg {
                Ok(v) => (v.to_string(), "ok".to_string()),
                Err(e) => (String::new(), format!("\"{}\"", e.replace('"', "'"))),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                control_name(r.transform),
                r.n_trees,
                r.learning_rate,
                self.mode,
                v,
                status
            );
        }
        out
    }
}

/// Per control choice: the signals on both splits and the debiased
/// validation gains.
struct Candidate {
    control: Option<TransformKind>,
    prepared: Result<Prepared, String>,
}

struct Prepared {
    fitted: Option<FittedTransform>,
    train_signals: ControlSignals,
    debias: DebiasModel,
    proxy: Vec<Vec<f64>>,
}

struct Trained {
    candidate: usize,
    learning_rate: f64,
    model: Result<RankerEnsemble, String>,
    /// `prefix_scores[k][query][doc]` for the k-th sorted tree count.
    prefix_scores: Vec<Vec<Vec<f64>>>,
}

/// Models for every (control, learning rate) pair of a grid, ready to be
/// scored under any validation mode.
pub struct TrainedGrid<'a> {
    inputs: TuneInputs<'a>,
    n_trees: Vec<usize>,
    candidates: Vec<Candidate>,
    trained: Vec<Trained>,
}

fn prepare(inputs: &TuneInputs<'_>, control: Option<TransformKind>) -> Result<Prepared, PipelineError> {
    let (fitted, train_signals, valid_signals) = match control {
        None => (
            None,
            ControlSignals::zeros(inputs.train.data),
            ControlSignals::zeros(inputs.valid.data),
        ),
        Some(kind) => {
            let (train_signals, fitted) = apply_all(kind, inputs.train.residuals)?;
            let valid_signals = apply_fitted(&fitted, inputs.valid.residuals)?;
            (Some(fitted), train_signals, valid_signals)
        }
    };
    let debias = DebiasModel::fit(
        inputs.train.data,
        &train_signals,
        inputs.train.clicks,
        inputs.debias_lambda,
    )?;
    let proxy = debias
        .proxy(inputs.valid.data, &valid_signals, inputs.valid.clicks)?
        .values;
    Ok(Prepared {
        fitted,
        train_signals,
        debias,
        proxy,
    })
}

pub(super) fn prefix_scores(model: &RankerEnsemble, data: &Dataset, counts: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Vec<f64>>> = counts
        .iter()
        .map(|_| data.queries().iter().map(|q| Vec::with_capacity(q.len())).collect())
        .collect();
    let mut row = Vec::with_capacity(data.feature_dim() + 1);
    for (qi, q) in data.queries().iter().enumerate() {
        for d in &q.documents {
            row.clear();
            row.extend_from_slice(&d.features);
            row.push(0.0);
            // Same accumulation order as `RankerEnsemble::predict`, so each
            // prefix score equals the truncated model's score exactly.
            let mut s = model.base_score;
            let mut k = 0;
            for (t, tree) in model.trees.iter().enumerate() {
                while k < counts.len() && counts[k] == t {
                    out[k][qi].push(s);
                    k += 1;
                }
                s += model.learning_rate * tree.predict(&row);
            }
            while k < counts.len() {
                out[k][qi].push(s);
                k += 1;
            }
        }
    }
    out
}

/// Train one ensemble per (control, learning rate) with the largest tree
/// count of `n_trees`.
pub fn train_grid<'a>(
    inputs: TuneInputs<'a>,
    controls: &[Option<TransformKind>],
    n_trees: &[usize],
    learning_rates: &[f64],
) -> Result<TrainedGrid<'a>, PipelineError> {
    if controls.is_empty() || n_trees.is_empty() || learning_rates.is_empty() {
        return Err(PipelineError::Config("tuning grid has an empty axis".into()));
    }
    let mut counts = n_trees.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let mut rates = learning_rates.to_vec();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let max_trees = *counts.last().expect("non-empty");

    let candidates: Vec<Candidate> = controls
        .par_iter()
        .map(|&control| Candidate {
            control,
            prepared: prepare(&inputs, control).map_err(|e| e.to_string()),
        })
        .collect();

    let jobs: Vec<(usize, f64)> = (0..candidates.len())
        .flat_map(|c| rates.iter().map(move |&lr| (c, lr)))
        .collect();
    let problems: Vec<Result<RankingProblem, String>> = candidates
        .par_iter()
        .map(|c| match &c.prepared {
            Ok(p) => RankingProblem::from_clicks(
                inputs.train.data,
                inputs.train.clicks,
                &p.train_signals,
                inputs.params.ndcg_cutoff,
            )
            .map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        })
        .collect();
    let trained: Vec<Trained> = jobs
        .par_iter()
        .map(|&(c, lr)| {
            let params = TrainParams {
                n_trees: max_trees,
                learning_rate: lr,
                ..inputs.params
            };
            let model = problems[c]
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|p| p.train(&params).map_err(|e| e.to_string()));
            let prefix_scores = match &model {
                Ok(m) => prefix_scores(m, inputs.valid.data, &counts),
                Err(_) => Vec::new(),
            };
            Trained {
                candidate: c,
                learning_rate: lr,
                model,
                prefix_scores,
            }
        })
        .collect();
    Ok(TrainedGrid {
        inputs,
        n_trees: counts,
        candidates,
        trained,
    })
}

impl TrainedGrid<'_> {
    /// Validation gains of `mode` for a candidate.
    fn gains(&self, mode: ValidationMode, candidate: &Candidate) -> Result<Vec<Vec<f64>>, String> {
        let valid = self.inputs.valid;
        Ok(match mode {
            ValidationMode::TrueRelevance => valid
                .data
                .queries()
                .iter()
                .map(|q| q.documents.iter().map(|d| relevance_gain(d.relevance)).collect())
                .collect(),
            ValidationMode::BiasedClicks => valid.clicks.click_rates(),
            ValidationMode::DebiasedClicks => candidate.prepared.as_ref().map_err(Clone::clone)?.proxy.clone(),
        })
    }

    /// Score every configuration under `mode` and return the best one.
    /// Ties go to fewer trees, then the smaller learning rate, then the
    /// earlier transform.
    pub fn select(&self, mode: ValidationMode) -> Result<TuneOutcome, PipelineError> {
        let valid = self.inputs.valid;
        let mut report = Vec::new();
        let mut best: Option<(usize, usize, f64)> = None;
        let gains: Vec<Result<Vec<Vec<f64>>, String>> = self.candidates.iter().map(|c| self.gains(mode, c)).collect();
        let mut order: Vec<(usize, usize)> = (0..self.trained.len())
            .flat_map(|t| (0..self.n_trees.len()).map(move |k| (t, k)))
            .collect();
        order.sort_by(|&(ta, ka), &(tb, kb)| {
            let (a, b) = (&self.trained[ta], &self.trained[tb]);
            self.n_trees[ka]
                .cmp(&self.n_trees[kb])
                .then(a.learning_rate.total_cmp(&b.learning_rate))
                .then(
                    self.candidates[a.candidate]
                        .control
                        .cmp(&self.candidates[b.candidate].control),
                )
        });
        for (t, k) in order {
            let tr = &self.trained[t];
            let cand = &self.candidates[tr.candidate];
            let ndcg = tr.model.as_ref().map_err(Clone::clone).and_then(|_| {
                let g = gains[tr.candidate].as_ref().map_err(Clone::clone)?;
                mean_ndcg_with_gains(valid.data, &tr.prefix_scores[k], g, VALIDATION_CUTOFF)
                    .map_err(|e| e.to_string())?
                    .ok_or_else(|| "no validation query has positive gain".to_string())
            });
            if let Ok(v) = ndcg {
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((t, k, v));
                }
            }
            report.push(ConfigResult {
                transform: cand.control,
                n_trees: self.n_trees[k],
                learning_rate: tr.learning_rate,
                validation_ndcg: ndcg,
            });
        }
        let Some((t, k, v)) = best else {
            let causes: Vec<String> = report
                .iter()
                .filter_map(|r| r.validation_ndcg.as_ref().err().cloned())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            return Err(PipelineError::AllConfigsFailed(causes.join("; ")));
        };
        let tr = &self.trained[t];
        let cand = &self.candidates[tr.candidate];
        let prepared = cand.prepared.as_ref().expect("selected candidate prepared");
        let best = tr
            .model
            .as_ref()
            .expect("selected model trained")
            .truncated(self.n_trees[k]);
        Ok(TuneOutcome {
            mode,
            best,
            best_config: ConfigResult {
                transform: cand.control,
                n_trees: self.n_trees[k],
                learning_rate: tr.learning_rate,
                validation_ndcg: Ok(v),
            },
            fitted: prepared.fitted.clone(),
            debias: Some(prepared.debias),
            floor_hits: prepared.train_signals.floor_hits,
            report,
        })
    }
}

/// Run the full grid and return the configuration with the lowest
/// validation loss `−NDCG@10` under `grid.validation`.
pub fn tune_and_train(inputs: TuneInputs<'_>, grid: &TuneGrid) -> Result<TuneOutcome, PipelineError> {
    grid.validate()?;
    let controls: Vec<Option<TransformKind>> = grid.transforms.iter().copied().map(Some).collect();
    train_grid(inputs, &controls, &grid.n_trees, &grid.learning_rates)?.select(grid.validation)
}

/// The uncorrected baseline: the same search with the control slot held at
/// zero, so only the tree count and learning rate are tuned.
pub fn tune_baseline(inputs: TuneInputs<'_>, grid: &TuneGrid) -> Result<TuneOutcome, PipelineError> {
    grid.validate()?;
    train_grid(inputs, &[None], &grid.n_trees, &grid.learning_rates)?.select(grid.validation)
}

/// Validation NDCG@10 of a model under `mode`, recomputed from scratch.
pub fn validation_ndcg(
    model: &RankerEnsemble,
    inputs: &TuneInputs<'_>,
    mode: ValidationMode,
    control: Option<TransformKind>,
) -> Result<f64, PipelineError> {
    let valid = inputs.valid;
    let scores = crate::metrics::score_dataset(model, valid.data)?;
    let gains = match mode {
        ValidationMode::TrueRelevance => valid
            .data
            .queries()
            .iter()
            .map(|q| q.documents.iter().map(|d| relevance_gain(d.relevance)).collect())
            .collect(),
        ValidationMode::BiasedClicks => valid.clicks.click_rates(),
        ValidationMode::DebiasedClicks => prepare(inputs, control)?.proxy,
    };
    mean_ndcg_with_gains(valid.data, &scores, &gains, VALIDATION_CUTOFF)?
        .ok_or_else(|| PipelineError::Config("no validation query has positive gain".into()))
}
