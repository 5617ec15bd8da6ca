//! First stage: a model of the logged position from the features, and the
//! residuals it leaves behind.
//!
//! The targets are raw 1-based positions. Ridge regression keeps its
//! intercept out of the penalty, so training residuals average to zero.

use std::fmt;
use std::fmt::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clicks::{doc_index, RankedLists};
use crate::data::Dataset;
use crate::gbdt::{train_pointwise, FeatureMatrix, GbdtError, RankerEnsemble, TrainParams};
use crate::stats::{fligner_killeen, StatsError, VarianceTest};
use crate::util::tsv_rows;

/// Penalties tried when the ridge penalty is selected on held-out queries.
pub const RIDGE_LAMBDA_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];

/// Share of training queries held out to select the ridge penalty.
pub const RIDGE_HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("penalty must be finite and >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("normal equations are singular (rank-deficient features with no penalty)")]
    Singular,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("rankings do not cover the dataset: {0}")]
    Coverage(String),
    #[error("unknown first-stage kind {0:?} (expected ridge or gbdt)")]
    UnknownKind(String),
    #[error("need at least 2 bins with 2 residuals each, got {0} usable bins")]
    InsufficientBins(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Linear model `intercept + weights·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Solve `A x = b` for symmetric positive definite `A` (row-major, `n × n`)
/// by Cholesky factorisation. Returns `None` when a pivot is not clearly
/// positive relative to the diagonal scale.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= tol || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Penalised least squares with an unpenalised intercept:
/// `w = (XcᵀXc + λI)⁻¹ Xcᵀ(y − ȳ)` on column-centred `Xc`, and
/// `intercept = ȳ − w·x̄`.
pub fn fit_ridge(x: &FeatureMatrix, y: &[f64], lambda: f64) -> Result<RidgeModel, ControlError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ControlError::InvalidLambda(lambda));
    }
    let n = x.n_rows();
    if y.len() != n {
        return Err(ControlError::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if n < 2 {
        return Err(ControlError::TooFewRows { needed: 2, got: n });
    }
    let d = x.n_cols();
    let mut x_mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in x_mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    x_mean.iter_mut().for_each(|m| *m /= n as f64);
    let y_mean = y.iter().sum::<f64>() / n as f64;

    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut centred = vec![0.0; d];
    for (i, &yi) in y.iter().enumerate() {
        for ((c, v), m) in centred.iter_mut().zip(x.row(i)).zip(&x_mean) {
            *c = v - m;
        }
        let yc = yi - y_mean;
        for a in 0..d {
            rhs[a] += centred[a] * yc;
            for b in 0..=a {
                gram[a * d + b] += centred[a] * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[b * d + a] = gram[a * d + b];
        }
        gram[a * d + a] += lambda;
    }
    let weights = if d == 0 {
        Vec::new()
    } else {
        cholesky_solve(&gram, &rhs, d).ok_or(ControlError::Singular)?
    };
    let intercept = y_mean - weights.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(RidgeModel {
        weights,
        intercept,
        lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FirstStageKind {
    Ridge,
    GbdtRegression,
}

impl FirstStageKind {
    pub fn name(self) -> &'static str {
        match self {
            FirstStageKind::Ridge => "ridge",
            FirstStageKind::GbdtRegression => "gbdt",
        }
    }
}

impl fmt::Display for FirstStageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FirstStageKind {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ridge" => Ok(FirstStageKind::Ridge),
            "gbdt" | "gbdt-regression" => Ok(FirstStageKind::GbdtRegression),
            other => Err(ControlError::UnknownKind(other.to_string())),
        }
    }
}

/// Hyperparameters of the first stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstStageConfig {
    pub kind: FirstStageKind,
    /// Ridge penalty; `None` selects it from [`RIDGE_LAMBDA_GRID`] on a
    /// held-out share of the training queries.
    pub lambda: Option<f64>,
    /// Boosting parameters for the gbdt kind.
    pub gbdt: TrainParams,
    /// Seed of the held-out split used for penalty selection.
    pub seed: u64,
}

impl Default for FirstStageConfig {
    fn default() -> Self {
        FirstStageConfig {
            kind: FirstStageKind::Ridge,
            lambda: None,
            gbdt: TrainParams {
                n_trees: 100,
                learning_rate: 0.1,
                max_leaves: 31,
                min_data_in_leaf: 20,
                ..TrainParams::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FirstStageModel {
    Ridge(RidgeModel),
    Gbdt(RankerEnsemble),
}

impl FirstStageModel {
    pub fn kind(&self) -> FirstStageKind {
        match self {
            FirstStageModel::Ridge(_) => FirstStageKind::Ridge,
            FirstStageModel::Gbdt(_) => FirstStageKind::GbdtRegression,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FirstStageModel::Ridge(m) => m.weights.len(),
            FirstStageModel::Gbdt(m) => m.input_dim,
        }
    }

    /// Predicted position of a document.
    pub fn predict(&self, features: &[f64]) -> Result<f64, ControlError> {
        if features.len() != self.input_dim() {
            return Err(ControlError::DimensionMismatch {
                expected: self.input_dim(),
                found: features.len(),
            });
        }
        Ok(match self {
            FirstStageModel::Ridge(m) => m.predict(features),
            FirstStageModel::Gbdt(m) => m.predict_row(features)?,
        })
    }
}

fn position_targets(data: &Dataset, lists: &RankedLists) -> Result<(FeatureMatrix, Vec<f64>), ControlError> {
    lists.check(data).map_err(|e| ControlError::Coverage(e.to_string()))?;
    let mut x = FeatureMatrix::new(data.feature_dim());
    let mut y = Vec::with_capacity(data.n_documents());
    for (q, l) in data.queries().iter().zip(&lists.lists) {
        for (d, &p) in q.documents.iter().zip(&l.positions) {
            x.push_row(&d.features)?;
            y.push(f64::from(p));
        }
    }
    Ok((x, y))
}

/// Pick the ridge penalty from `grid` by squared error on a held-out share
/// of queries. Ties go to the earlier grid entry.
pub fn select_ridge_lambda(data: &Dataset, lists: &RankedLists, grid: &[f64], seed: u64) -> Result<f64, ControlError> {
    lists.check(data).map_err(|e| ControlError::Coverage(e.to_string()))?;
    let n = data.n_queries();
    if grid.is_empty() {
        return Err(ControlError::InvalidLambda(f64::NAN));
    }
    if n < 2 {
        return Ok(grid[0]);
    }
    let k = ((RIDGE_HOLDOUT_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        held[i] = true;
    }
    let pick = |keep: bool| {
        let idx: Vec<usize> = (0..n).filter(|&i| held[i] == keep).collect();
        let lists = RankedLists {
            lists: idx.iter().map(|&i| lists.lists[i].clone()).collect(),
        };
        (data.select(&idx), lists)
    };
    let (fit_data, fit_lists) = pick(false);
    let (val_data, val_lists) = pick(true);
    let (x, y) = position_targets(&fit_data, &fit_lists)?;
    let (xv, yv) = position_targets(&val_data, &val_lists)?;
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let model = match fit_ridge(&x, &y, lambda) {
            Ok(m) => m,
            Err(ControlError::Singular) => continue,
            Err(e) => return Err(e),
        };
        let sse: f64 = (0..xv.n_rows())
            .map(|i| (model.predict(xv.row(i)) - yv[i]).powi(2))
            .sum();
        if best.is_none_or(|(_, b)| sse < b) {
            best = Some((lambda, sse));
        }
    }
    best.map(|(l, _)| l).ok_or(ControlError::Singular)
}

/// Fit the first-stage model of logged positions.
pub fn fit_first_stage(
    data: &Dataset,
    lists: &RankedLists,
    config: &FirstStageConfig,
) -> Result<FirstStageModel, ControlError> {
    let (x, y) = position_targets(data, lists)?;
    match config.kind {
        FirstStageKind::Ridge => {
            let lambda = match config.lambda {
                Some(l) => l,
                None => select_ridge_lambda(data, lists, &RIDGE_LAMBDA_GRID, config.seed)?,
            };
            Ok(FirstStageModel::Ridge(fit_ridge(&x, &y, lambda)?))
        }
        FirstStageKind::GbdtRegression => Ok(FirstStageModel::Gbdt(train_pointwise(&x, &y, &config.gbdt)?)),
    }
}

/// Residuals of one query, parallel to its documents.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResiduals {
    pub query_id: String,
    pub positions: Vec<u32>,
    pub predicted: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// First-stage residuals `observed position − predicted position`, aligned
/// with the dataset and rankings they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub queries: Vec<QueryResiduals>,
}

impl ResidualSet {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.queries.iter().flat_map(|q| q.residuals.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.queries.iter().map(|q| q.residuals.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, data: &Dataset) -> Result<(), ControlError> {
        if self.queries.len() != data.n_queries() {
            return Err(ControlError::Coverage(format!(
                "{} residual blocks for {} queries",
                self.queries.len(),
                data.n_queries()
            )));
        }
        for (r, q) in self.queries.iter().zip(data.queries()) {
            let n = q.len();
            if r.query_id != q.query_id || r.positions.len() != n || r.predicted.len() != n || r.residuals.len() != n {
                return Err(ControlError::Coverage(format!(
                    "residuals for query {} do not cover query {}",
                    r.query_id, q.query_id
                )));
            }
        }
        Ok(())
    }

    /// TSV `query_id doc_id position predicted residual`.
    pub fn to_tsv(&self, data: &Dataset) -> String {
        let mut out = String::from("query_id\tdoc_id\tposition\tpredicted\tresidual\n");
        for (r, q) in self.queries.iter().zip(data.queries()) {
            for (i, d) in q.documents.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    q.query_id, d.doc_id, r.positions[i], r.predicted[i], r.residuals[i]
                );
            }
        }
        out
    }

    pub fn from_tsv(text: &str, data: &Dataset) -> Result<Self, ControlError> {
        let index = doc_index(data);
        let mut rows: Vec<Vec<Option<(u32, f64, f64)>>> = data.queries().iter().map(|q| vec![None; q.len()]).collect();
        for (line, f) in tsv_rows(text, "query_id") {
            let bad = |msg: &str| ControlError::Parse {
                line,
                msg: msg.to_string(),
            };
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let &(qi, di) = index.get(&(f[0], f[1])).ok_or_else(|| bad("unknown query/document"))?;
            let pos: u32 = f[2].parse().map_err(|_| bad("bad position"))?;
            let pred: f64 = f[3].parse().map_err(|_| bad("bad prediction"))?;
            let res: f64 = f[4].parse().map_err(|_| bad("bad residual"))?;
            rows[qi][di] = Some((pos, pred, res));
        }
        let mut queries = Vec::with_capacity(rows.len());
        for (q, r) in data.queries().iter().zip(rows) {
            let mut qr = QueryResiduals {
                query_id: q.query_id.clone(),
                positions: Vec::with_capacity(q.len()),
                predicted: Vec::with_capacity(q.len()),
                residuals: Vec::with_capacity(q.len()),
            };
            for (d, cell) in q.documents.iter().zip(r) {
                let (p, pr, re) =
                    cell.ok_or_else(|| ControlError::Coverage(format!("no residual for {}/{}", q.query_id, d.doc_id)))?;
                qr.positions.push(p);
                qr.predicted.push(pr);
                qr.residuals.push(re);
            }
            queries.push(qr);
        }
        Ok(ResidualSet { queries })
    }
}

/// Residuals of `model` on the logged positions of `lists`.
pub fn residuals(model: &FirstStageModel, data: &Dataset, lists: &RankedLists) -> Result<ResidualSet, ControlError> {
    lists.check(data).map_err(|e| ControlError::Coverage(e.to_string()))?;
    let queries = data
        .queries()
        .iter()
        .zip(&lists.lists)
        .map(|(q, l)| {
            let predicted = q
                .documents
                .iter()
                .map(|d| model.predict(&d.features))
                .collect::<Result<Vec<f64>, _>>()?;
            let residuals = l
                .positions
                .iter()
                .zip(&predicted)
                .map(|(&p, r)| f64::from(p) - r)
                .collect();
            Ok(QueryResiduals {
                query_id: q.query_id.clone(),
                positions: l.positions.clone(),
                predicted,
                residuals,
            })
        })
        .collect::<Result<_, ControlError>>()?;
    Ok(ResidualSet { queries })
}

/// Fligner–Killeen test of residual variance across `n_bins` equal-frequency
/// bins of the predicted position. Bins holding fewer than 2 residuals are
/// dropped.
pub fn heteroskedasticity_report(residuals: &ResidualSet, n_bins: usize) -> Result<VarianceTest, ControlError> {
    let mut pairs: Vec<(f64, f64)> = residuals
        .queries
        .iter()
        .flat_map(|q| q.predicted.iter().copied().zip(q.residuals.iter().copied()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let bins = n_bins.min(n).max(1);
    let groups: Vec<Vec<f64>> = (0..bins)
        .map(|b| pairs[b * n / bins..(b + 1) * n / bins].iter().map(|p| p.1).collect())
        .filter(|g: &Vec<f64>| g.len() >= 2)
        .collect();
    if groups.len() < 2 {
        return Err(ControlError::InsufficientBins(groups.len()));
    }
    Ok(fligner_killeen(&groups)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::{rank_with, LinearRanker};
    use crate::data::synth_dataset;

    fn matrix(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn exact_fit() {
        let m = fit_ridge(&matrix(&[&[1.0], &[2.0]]), &[1.0, 2.0], 0.0).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-12);
    }

    #[test]
    fn heavy_penalty_predicts_the_mean() {
        let x = matrix(&[&[1.0, 0.0], &[2.0, 1.0], &[3.0, 5.0]]);
        let m = fit_ridge(&x, &[1.0, 2.0, 6.0], 1e12).unwrap();
        for i in 0..3 {
            assert!((m.predict(x.row(i)) - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_without_penalty_is_singular() {
        let x = matrix(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert_eq!(fit_ridge(&x, &[1.0, 2.0, 3.0], 0.0), Err(ControlError::Singular));
        assert!(fit_ridge(&x, &[1.0, 2.0, 3.0], 0.1).is_ok());
        assert!(matches!(
            fit_ridge(&matrix(&[&[1.0]]), &[1.0], 0.0),
            Err(ControlError::TooFewRows { .. })
        ));
        assert!(fit_ridge(&x, &[1.0, 2.0, 3.0], -1.0).is_err());
    }

    #[test]
    fn cholesky_matches_known_solution() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[2.0, 1.0], 2).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15);
        assert!(x[1].abs() < 1e-15);
    }

    #[test]
    fn ridge_residuals_average_to_zero() {
        let data = synth_dataset(30, 10, 5, 3).unwrap();
        let ranker = LinearRanker {
            weights: vec![1.0, -0.5, 0.2, 0.0, 0.3],
            bias: 0.0,
        };
        let lists = rank_with(&ranker, &data).unwrap();
        let cfg = FirstStageConfig::default();
        let model = fit_first_stage(&data, &lists, &cfg).unwrap();
        let res = residuals(&model, &data, &lists).unwrap();
        let mean = res.values().sum::<f64>() / res.len() as f64;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert_eq!(res.len(), data.n_documents());
    }

    #[test]
    fn gbdt_with_no_trees_predicts_the_mean_position() {
        let data = synth_dataset(5, 6, 3, 1).unwrap();
        let lists = rank_with(
            &LinearRanker {
                weights: vec![1.0, 0.0, 0.0],
                bias: 0.0,
            },
            &data,
        )
        .unwrap();
        let mut cfg = FirstStageConfig {
            kind: FirstStageKind::GbdtRegression,
            ..FirstStageConfig::default()
        };
        cfg.gbdt.n_trees = 0;
        let model = fit_first_stage(&data, &lists, &cfg).unwrap();
        for d in data.documents() {
            assert!((model.predict(&d.features).unwrap() - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_tsv_round_trip() {
        let data = synth_dataset(4, 5, 2, 9).unwrap();
        let lists = rank_with(
            &LinearRanker {
                weights: vec![0.4, 0.6],
                bias: 0.0,
            },
            &data,
        )
        .unwrap();
        let model = fit_first_stage(&data, &lists, &FirstStageConfig::default()).unwrap();
        let res = residuals(&model, &data, &lists).unwrap();
        let back = ResidualSet::from_tsv(&res.to_tsv(&data), &data).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn heteroskedastic_bins() {
        let mut predicted = Vec::new();
        let mut resid = Vec::new();
        for i in 0..400 {
            let p = i as f64 / 40.0;
            predicted.push(p);
            // Alternating sign, magnitude growing with the prediction.
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            resid.push(sign * (0.1 + p) * (1.0 + (i % 7) as f64 / 7.0));
        }
        let set = ResidualSet {
            queries: vec![QueryResiduals {
                query_id: "1".into(),
                positions: vec![1; 400],
                predicted,
                residuals: resid,
            }],
        };
        let report = heteroskedasticity_report(&set, 10).unwrap();
        assert_eq!(report.dof, 9);
        assert!(report.p_value < 0.05);
        assert!(matches!(
            heteroskedasticity_report(&set, 1),
            Err(ControlError::InsufficientBins(1))
        ));
    }
}
