//! Experiment sweeps: one full run per (axis value, seed), comparing the
//! corrected ranker with the uncorrected baseline and a ranker trained on
//! true relevance.
//!
//! Each run:
//!
//! 1. builds train/validation/test splits (synthetic or LETOR files) and
//!    min-max normalizes them with statistics from the training split;
//! 2. trains the initial linear ranker on a small share of the training
//!    queries and logs rankings and clicks on the rest and on validation;
//! 3. fits the first stage, computes residuals and the
//!    heteroskedasticity test;
//! 4. tunes the corrected ranker (one trained grid scored under all three
//!    validation modes), the baseline and the oracle;
//! 5. evaluates every model on the test split.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use super::debias::DEFAULT_DEBIAS_LAMBDA;
use super::tune::{prefix_scores, train_grid, SplitInputs, TuneGrid, TuneInputs, TuneOutcome, ValidationMode};
use super::PipelineError;
use crate::clicks::{rank_with, simulate_clicks, train_initial_ranker, SimConfig};
use crate::control::{fit_first_stage, heteroskedasticity_report, residuals, FirstStageConfig};
use crate::data::{apply_normalizer, fit_normalizer, parse_letor, sample_fraction, synth_dataset, Dataset};
use crate::gbdt::{RankerEnsemble, RankingProblem, TrainParams};
use crate::metrics::{
    evaluate, fisher_randomization, mean_ndcg, EvalReport, MetricConfig, MetricKind, DEFAULT_PERMUTATIONS,
};
use crate::stats::VarianceTest;
use crate::transforms::TransformKind;
use crate::util::derive_seed;

/// Epochs of the initial pairwise ranker.
pub const INITIAL_EPOCHS: usize = 10;
/// Step size of the initial pairwise ranker.
pub const INITIAL_STEP: f64 = 0.01;
/// Equal-frequency bins of the heteroskedasticity test.
pub const HET_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    Eta,
    Passes,
    Noise,
    ValidQueries,
    FirstStageKind,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Eta => "eta",
            SweepAxis::Passes => "passes",
            SweepAxis::Noise => "noise",
            SweepAxis::ValidQueries => "valid-queries",
            SweepAxis::FirstStageKind => "first-stage-kind",
        }
    }

    /// Configuration with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, PipelineError> {
        let mut out = cfg.clone();
        let bad = || PipelineError::Config(format!("invalid {} value {value:?}", self.name()));
        match self {
            SweepAxis::Eta => out.sim.eta = value.parse().map_err(|_| bad())?,
            SweepAxis::Passes => out.sim.passes = value.parse().map_err(|_| bad())?,
            SweepAxis::Noise => out.sim.eps_noise = value.parse().map_err(|_| bad())?,
            SweepAxis::ValidQueries => out.valid_subsample = Some(value.parse().map_err(|_| bad())?),
            SweepAxis::FirstStageKind => out.first_stage.kind = value.parse()?,
        }
        Ok(out)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            SweepAxis::Eta,
            SweepAxis::Passes,
            SweepAxis::Noise,
            SweepAxis::ValidQueries,
            SweepAxis::FirstStageKind,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| PipelineError::UnknownAxis(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        train_queries: usize,
        valid_queries: usize,
        test_queries: usize,
        docs_per_query: usize,
        feature_dim: usize,
    },
    Letor {
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub n_seeds: usize,
    pub data: DataSource,
    /// Share of training queries used to train the initial ranker. These
    /// queries get no clicks.
    pub initial_fraction: f64,
    /// The `seed` field is ignored; each run derives its own.
    pub sim: SimConfig,
    pub first_stage: FirstStageConfig,
    pub grid: TuneGrid,
    /// Tree shape and lambda cutoff; tree count and learning rate are tuned.
    pub train: TrainParams,
    pub debias_lambda: f64,
    pub metrics: MetricConfig,
    pub permutations: usize,
    /// Whether to train the oracle ranker on true relevance.
    pub oracle: bool,
    /// Number of validation queries kept, when subsampling validation.
    pub valid_subsample: Option<usize>,
    pub axis: Option<SweepAxis>,
    pub values: Vec<String>,
    /// Where the command-line front end writes outputs.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            n_seeds: 1,
            data: DataSource::Synthetic {
                train_queries: 200,
                valid_queries: 50,
                test_queries: 100,
                docs_per_query: 20,
                feature_dim: 10,
            },
            initial_fraction: 0.01,
            sim: SimConfig::default(),
            first_stage: FirstStageConfig::default(),
            grid: TuneGrid::default(),
            train: TrainParams::default(),
            debias_lambda: DEFAULT_DEBIAS_LAMBDA,
            metrics: MetricConfig::default(),
            permutations: DEFAULT_PERMUTATIONS,
            oracle: true,
            valid_subsample: None,
            axis: None,
            values: Vec::new(),
            output_dir: None,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, PipelineError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

impl ExperimentConfig {
    /// Parse a flat `key = value` file. `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = ExperimentConfig::default();
        let mut synth = (200, 50, 100, 20, 10);
        let mut files: [Option<PathBuf>; 3] = [None, None, None];
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", no + 1)))?;
            let num = |v: &str| -> Result<f64, PipelineError> {
                v.parse()
                    .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {v:?}")))
            };
            let int = |v: &str| -> Result<usize, PipelineError> {
                v.parse()
                    .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {v:?}")))
            };
            match key {
                "seed" => cfg.master_seed = int(value)? as u64,
                "seeds" => cfg.n_seeds = int(value)?,
                "train_queries" => synth.0 = int(value)?,
                "valid_queries" => synth.1 = int(value)?,
                "test_queries" => synth.2 = int(value)?,
                "docs_per_query" => synth.3 = int(value)?,
                "feature_dim" => synth.4 = int(value)?,
                "train_file" => files[0] = Some(value.into()),
                "valid_file" => files[1] = Some(value.into()),
                "test_file" => files[2] = Some(value.into()),
                "initial_fraction" => cfg.initial_fraction = num(value)?,
                "eta" => cfg.sim.eta = num(value)?,
                "noise" => cfg.sim.eps_noise = num(value)?,
                "passes" => cfg.sim.passes = int(value)?,
                "first_stage" => cfg.first_stage.kind = value.parse()?,
                "ridge_lambda" => {
                    cfg.first_stage.lambda = match value {
                        "auto" => None,
                        v => Some(num(v)?),
                    }
                }
                "transforms" => cfg.grid.transforms = parse_list::<TransformKind>(key, value)?,
                "n_trees" => cfg.grid.n_trees = parse_list(key, value)?,
                "learning_rates" => cfg.grid.learning_rates = parse_list(key, value)?,
                "validation" => cfg.grid.validation = value.parse()?,
                "max_leaves" => cfg.train.max_leaves = int(value)?,
                "min_data_in_leaf" => cfg.train.min_data_in_leaf = int(value)?,
                "ndcg_cutoff" => cfg.train.ndcg_cutoff = int(value)?,
                "debias_lambda" => cfg.debias_lambda = num(value)?,
                "cutoffs" => cfg.metrics.cutoffs = parse_list(key, value)?,
                "permutations" => cfg.permutations = int(value)?,
                "oracle" => {
                    cfg.oracle = value
                        .parse()
                        .map_err(|_| PipelineError::Config(format!("oracle: expected true or false, got {value:?}")))?
                }
                "valid_subsample" => cfg.valid_subsample = Some(int(value)?),
                "axis" => cfg.axis = Some(value.parse()?),
                "values" => cfg.values = parse_list(key, value)?,
                "output_dir" => cfg.output_dir = Some(value.into()),
                other => return Err(PipelineError::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.data = match files {
            [None, None, None] => DataSource::Synthetic {
                train_queries: synth.0,
                valid_queries: synth.1,
                test_queries: synth.2,
                docs_per_query: synth.3,
                feature_dim: synth.4,
            },
            [Some(train), Some(valid), Some(test)] => DataSource::Letor { train, valid, test },
            _ => {
                return Err(PipelineError::Config(
                    "train_file, valid_file and test_file must be given together".into(),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_seeds == 0 {
            return Err(PipelineError::Config("seeds must be >= 1".into()));
        }
        if self.axis.is_some() && self.values.is_empty() {
            return Err(PipelineError::Config("a sweep axis needs values".into()));
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction < 1.0) {
            return Err(PipelineError::Config(format!(
                "initial_fraction must lie in (0, 1), got {}",
                self.initial_fraction
            )));
        }
        self.grid.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        if let Some(axis) = self.axis {
            for v in &self.values {
                let cfg = axis.apply(self, v)?;
                cfg.sim.validate()?;
            }
        }
        Ok(())
    }

    /// Settings of the sweep: `(label, configuration)` per axis value, or a
    /// single unlabelled entry without an axis.
    pub fn settings(&self) -> Result<Vec<(String, ExperimentConfig)>, PipelineError> {
        match self.axis {
            None => Ok(vec![(String::new(), self.clone())]),
            Some(axis) => self
                .values
                .iter()
                .map(|v| Ok((v.clone(), axis.apply(self, v)?)))
                .collect(),
        }
    }
}

/// Train, validation and test splits of one run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

fn read(path: &PathBuf) -> Result<Dataset, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_letor(&text)?)
}

/// Load or generate the splits for `seed` and normalize them with training
/// statistics.
pub fn load_splits(source: &DataSource, seed: u64) -> Result<Splits, PipelineError> {
    let (train, valid, test) = match source {
        DataSource::Synthetic {
            train_queries,
            valid_queries,
            test_queries,
            docs_per_query,
            feature_dim,
        } => {
            let all = synth_dataset(
                train_queries + valid_queries + test_queries,
                *docs_per_query,
                *feature_dim,
                seed,
            )?;
            let (train, rest) = all.split_at(*train_queries);
            let (valid, test) = rest.split_at(*valid_queries);
            (train, valid, test)
        }
        DataSource::Letor { train, valid, test } => (read(train)?, read(valid)?, read(test)?),
    };
    let stats = fit_normalizer(&train)?;
    Ok(Splits {
        train: apply_normalizer(&train, &stats)?,
        valid: apply_normalizer(&valid, &stats)?,
        test: apply_normalizer(&test, &stats)?,
    })
}

/// Result of one (axis value, seed) run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub axis_value: String,
    pub seed_index: usize,
    pub seed: u64,
    /// Test reports by method: `cfc` (the configured validation mode),
    /// `cfc-tr`, `cfc-dc`, `cfc-bc`, `baseline` and `oracle` (when enabled).
    pub methods: BTreeMap<String, EvalReport>,
    /// Tuning outcome of `cfc`.
    pub cfc: TuneOutcome,
    pub baseline: TuneOutcome,
    pub oracle: Option<RankerEnsemble>,
    pub heteroskedasticity: Result<VarianceTest, String>,
    pub train_clicks: usize,
}

fn mode_method(mode: ValidationMode) -> &'static str {
    match mode {
        ValidationMode::TrueRelevance => "cfc-tr",
        ValidationMode::DebiasedClicks => "cfc-dc",
        ValidationMode::BiasedClicks => "cfc-bc",
    }
}

/// Oracle ranker: trained on graded relevance and tuned by true-relevance
/// validation NDCG@10 over the tree counts and learning rates of `grid`.
fn tune_oracle(
    train: &Dataset,
    valid: &Dataset,
    grid: &TuneGrid,
    params: &TrainParams,
) -> Result<RankerEnsemble, PipelineError> {
    let problem = RankingProblem::from_relevance(train, params.ndcg_cutoff)?;
    let mut counts = grid.n_trees.clone();
    counts.sort_unstable();
    counts.dedup();
    let mut rates = grid.learning_rates.clone();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let max_trees = *counts.last().expect("validated grid");
    let models: Vec<RankerEnsemble> = rates
        .par_iter()
        .map(|&lr| {
            problem.train(&TrainParams {
                n_trees: max_trees,
                learning_rate: lr,
                ..*params
            })
        })
        .collect::<Result<_, _>>()?;
    let prefixes: Vec<Vec<Vec<Vec<f64>>>> = models.iter().map(|m| prefix_scores(m, valid, &counts)).collect();
    let mut best: Option<(usize, usize, f64)> = None;
    for k in 0..counts.len() {
        for (m, scores) in prefixes.iter().enumerate() {
            if let Some(v) = mean_ndcg(valid, &scores[k], super::VALIDATION_CUTOFF)? {
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((m, k, v));
                }
            }
        }
    }
    let (m, k, _) =
        best.ok_or_else(|| PipelineError::AllConfigsFailed("no validation query has a relevant document".into()))?;
    Ok(models[m].truncated(counts[k]))
}

/// One complete run of the corrected ranker, baseline and oracle.
pub fn run_single(cfg: &ExperimentConfig, axis_value: &str, seed_index: usize) -> Result<RunResult, PipelineError> {
    let seed = derive_seed(cfg.master_seed, seed_index as u64);
    let splits = load_splits(&cfg.data, derive_seed(seed, 0))?;
    let valid = match cfg.valid_subsample {
        Some(k) if k < splits.valid.n_queries() => {
            let fraction = k as f64 / splits.valid.n_queries() as f64;
            sample_fraction(&splits.valid, fraction, derive_seed(seed, 1))?.0
        }
        _ => splits.valid.clone(),
    };
    let (initial, train) = sample_fraction(&splits.train, cfg.initial_fraction, derive_seed(seed, 2))?;
    if train.is_empty() {
        return Err(PipelineError::Config(
            "initial_fraction leaves no training queries for clicks".into(),
        ));
    }
    let ranker = train_initial_ranker(&initial, INITIAL_EPOCHS, INITIAL_STEP, derive_seed(seed, 3))?;
    let train_lists = rank_with(&ranker, &train)?;
    let valid_lists = rank_with(&ranker, &valid)?;
    let sim = |k: u64| SimConfig {
        seed: derive_seed(seed, k),
        ..cfg.sim
    };
    let train_clicks = simulate_clicks(&train_lists, &train, &sim(4))?;
    let valid_clicks = simulate_clicks(&valid_lists, &valid, &sim(5))?;

    let first_stage_cfg = FirstStageConfig {
        seed: derive_seed(seed, 6),
        ..cfg.first_stage
    };
    let first = fit_first_stage(&train, &train_lists, &first_stage_cfg)?;
    let train_res = residuals(&first, &train, &train_lists)?;
    let valid_res = residuals(&first, &valid, &valid_lists)?;
    let heteroskedasticity = heteroskedasticity_report(&train_res, HET_BINS).map_err(|e| e.to_string());

    let params = TrainParams {
        seed: derive_seed(seed, 7),
        ..cfg.train
    };
    let inputs = TuneInputs {
        train: SplitInputs {
            data: &train,
            clicks: &train_clicks,
            residuals: &train_res,
        },
        valid: SplitInputs {
            data: &valid,
            clicks: &valid_clicks,
            residuals: &valid_res,
        },
        params,
        debias_lambda: cfg.debias_lambda,
    };
    cfg.grid.validate()?;
    let controls: Vec<Option<TransformKind>> = cfg.grid.transforms.iter().copied().map(Some).collect();
    let grid = train_grid(inputs, &controls, &cfg.grid.n_trees, &cfg.grid.learning_rates)?;
    let baseline =
        train_grid(inputs, &[None], &cfg.grid.n_trees, &cfg.grid.learning_rates)?.select(cfg.grid.validation)?;
    let oracle = if cfg.oracle {
        Some(tune_oracle(&train, &valid, &cfg.grid, &params)?)
    } else {
        None
    };

    let mut methods = BTreeMap::new();
    let mut cfc = None;
    for mode in ValidationMode::ALL {
        let outcome = grid.select(mode)?;
        methods.insert(
            mode_method(mode).to_string(),
            evaluate(&outcome.best, &splits.test, &cfg.metrics)?,
        );
        if mode == cfg.grid.validation {
            cfc = Some(outcome);
        }
    }
    let cfc = cfc.expect("configured mode is one of ALL");
    methods.insert("cfc".into(), methods[mode_method(cfg.grid.validation)].clone());
    methods.insert("baseline".into(), evaluate(&baseline.best, &splits.test, &cfg.metrics)?);
    if let Some(oracle) = &oracle {
        methods.insert("oracle".into(), evaluate(oracle, &splits.test, &cfg.metrics)?);
    }
    Ok(RunResult {
        axis_value: axis_value.to_string(),
        seed_index,
        seed,
        methods,
        cfc,
        baseline,
        oracle,
        heteroskedasticity,
        train_clicks: train_clicks.total_clicks(),
    })
}

/// Summary of one method at one axis value, over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub axis_value: String,
    pub method: String,
    pub n_seeds: usize,
    /// `(metric, cutoff, mean over seeds)`.
    pub means: Vec<(MetricKind, usize, f64)>,
    /// Standard error over seeds of the per-seed mean NDCG@10.
    pub ndcg10_se: f64,
    /// Fisher randomization p-value against the baseline with seeds as the
    /// paired units (needs ≥ 2 seeds).
    pub p_vs_baseline_seeds: Option<f64>,
    /// Same test with test queries of every seed as the paired units.
    pub p_vs_baseline_queries: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub axis: Option<SweepAxis>,
    pub runs: Vec<RunResult>,
    pub summaries: Vec<MethodSummary>,
}

impl ExperimentReport {
    pub fn summary(&self, axis_value: &str, method: &str) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.axis_value == axis_value && s.method == method)
    }

    /// Per-seed means of `metric@cutoff` for a method at an axis value.
    pub fn per_seed(&self, axis_value: &str, method: &str, metric: MetricKind, cutoff: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.axis_value == axis_value)
            .filter_map(|r| r.methods.get(method).and_then(|m| m.mean(metric, cutoff)))
            .collect()
    }

    /// CSV with one row per run and method.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("axis,value,seed_index,method,metric,cutoff,mean,n_queries\n");
        let axis = self.axis.map_or("none", SweepAxis::name);
        for r in &self.runs {
            for (method, rep) in &r.methods {
                for s in &rep.series {
                    let _ = writeln!(
                        out,
                        "{axis},{},{},{method},{},{},{},{}",
                        r.axis_value,
                        r.seed_index,
                        s.metric,
                        s.cutoff,
                        s.mean,
                        s.per_query.len()
                    );
                }
            }
        }
        out
    }

    /// CSV of means over seeds with the significance of each method against
    /// the baseline.
    pub fn summary_csv(&self) -> String {
        let axis = self.axis.map_or("none", SweepAxis::name);
        let mut out = String::from("axis,value,method,n_seeds");
        if let Some(first) = self.summaries.first() {
            for (m, c, _) in &first.means {
                let _ = write!(out, ",{m}@{c}");
            }
        }
        out.push_str(",ndcg@10_se,p_vs_baseline_seeds,p_vs_baseline_queries\n");
        let opt = |p: Option<f64>| p.map_or(String::new(), |v| v.to_string());
        for s in &self.summaries {
            let _ = write!(out, "{axis},{},{},{}", s.axis_value, s.method, s.n_seeds);
            for (_, _, v) in &s.means {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(
                out,
                ",{},{},{}",
                s.ndcg10_se,
                opt(s.p_vs_baseline_seeds),
                opt(s.p_vs_baseline_queries)
            );
        }
        out
    }

    /// CSV of every tuning configuration of the corrected ranker per run.
    pub fn tuning_csv(&self) -> String {
        let mut out = String::from("value,seed_index,");
        let mut header_done = false;
        for r in &self.runs {
            let csv = r.cfc.report_csv();
            let mut lines = csv.lines();
            let header = lines.next().unwrap_or("");
            if !header_done {
                out.push_str(header);
                out.push('\n');
                header_done = true;
            }
            for l in lines {
                let _ = writeln!(out, "{},{},{l}", r.axis_value, r.seed_index);
            }
        }
        out
    }

    /// CSV of the heteroskedasticity test of each run.
    pub fn heteroskedasticity_csv(&self) -> String {
        let mut out = String::from("value,seed_index,statistic,dof,p_value,error\n");
        for r in &self.runs {
            match &r.heteroskedasticity {
                Ok(t) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},",
                        r.axis_value, r.seed_index, t.statistic, t.dof, t.p_value
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{},{},,,,\"{}\"", r.axis_value, r.seed_index, e);
                }
            }
        }
        out
    }
}

fn summarize(
    runs: &[RunResult],
    cfg: &ExperimentConfig,
    values: &[String],
) -> Result<Vec<MethodSummary>, PipelineError> {
    let mut out = Vec::new();
    for (vi, value) in values.iter().enumerate() {
        let here: Vec<&RunResult> = runs.iter().filter(|r| &r.axis_value == value).collect();
        let Some(first) = here.first() else { continue };
        for method in first.methods.keys() {
            let reports: Vec<&EvalReport> = here.iter().map(|r| &r.methods[method]).collect();
            let base: Vec<&EvalReport> = here.iter().map(|r| &r.methods["baseline"]).collect();
            let means = first.methods[method]
                .series
                .iter()
                .map(|s| {
                    let vals: Vec<f64> = reports.iter().filter_map(|r| r.mean(s.metric, s.cutoff)).collect();
                    (s.metric, s.cutoff, vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            let ndcg10: Vec<f64> = reports.iter().filter_map(|r| r.mean(MetricKind::Ndcg, 10)).collect();
            let base10: Vec<f64> = base.iter().filter_map(|r| r.mean(MetricKind::Ndcg, 10)).collect();
            let n = ndcg10.len();
            let se = if n > 1 {
                crate::stats::std_dev(&ndcg10, 1) / (n as f64).sqrt()
            } else {
                0.0
            };
            let test_seed = derive_seed(cfg.master_seed ^ 0x5eed, vi as u64);
            let (p_seeds, p_queries) = if method == "baseline" {
                (None, None)
            } else {
                let p_seeds = if n >= 2 && base10.len() == n {
                    Some(fisher_randomization(&ndcg10, &base10, cfg.permutations, test_seed)?)
                } else {
                    None
                };
                let pooled = |rs: &[&EvalReport]| -> Vec<f64> {
                    rs.iter()
                        .filter_map(|r| r.get(MetricKind::Ndcg, 10))
                        .flat_map(|s| s.per_query.iter().copied())
                        .collect()
                };
                let (a, b) = (pooled(&reports), pooled(&base));
                let p_queries = if a.len() >= 2 && a.len() == b.len() {
                    Some(fisher_randomization(&a, &b, cfg.permutations, test_seed ^ 1)?)
                } else {
                    None
                };
                (p_seeds, p_queries)
            };
            out.push(MethodSummary {
                axis_value: value.clone(),
                method: method.clone(),
                n_seeds: n,
                means,
                ndcg10_se: se,
                p_vs_baseline_seeds: p_seeds,
                p_vs_baseline_queries: p_queries,
            });
        }
    }
    Ok(out)
}

/// Run every (axis value, seed) combination and summarize. Runs execute in
/// parallel; results are assembled in (axis value, seed) order and do not
/// depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    cfg.validate()?;
    let settings = cfg.settings()?;
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|v| (0..cfg.n_seeds).map(move |s| (v, s)))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(v, s)| run_single(&settings[v].1, &settings[v].0, s))
        .collect::<Result<_, _>>()?;
    let values: Vec<String> = settings.iter().map(|(v, _)| v.clone()).collect();
    let summaries = summarize(&runs, cfg, &values)?;
    Ok(ExperimentReport {
        axis: cfg.axis,
        runs,
        summaries,
    })
}
