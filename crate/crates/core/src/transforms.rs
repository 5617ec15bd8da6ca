//! Residual transforms used as the second-stage control signal.
//!
//! | kind          | value                                    |
//! |---------------|------------------------------------------|
//! | `minmax`      | `(v − min)/(max − min)`, clamped to [0,1] |
//! | `pdf`         | fitted normal density `φ((v−μ)/σ)/σ`      |
//! | `imr`         | fitted normal `f(v)/F(v)`                 |
//! | `kde-hazard`  | Gaussian-KDE `f̂(v)/F̂(v)`                 |
//!
//! The hazard-style transforms divide by the CDF, floored at
//! [`CDF_FLOOR`]; every flooring is counted in
//! [`ControlSignals::floor_hits`].

use std::fmt;
use std::fmt::Write;
use std::str::FromStr;

use thiserror::Error;

use crate::control::ResidualSet;
use crate::data::Dataset;
use crate::stats::{self, normal_cdf, normal_pdf};
use crate::util::tsv_rows;

pub const CDF_FLOOR: f64 = 1e-12;

/// Bin count of the summarised KDE.
pub const KDE_BINS: usize = 512;

/// Above this many residuals the KDE is evaluated from a binned summary.
pub const KDE_EXACT_LIMIT: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("need at least 2 residuals, got {0}")]
    TooFew(usize),
    #[error("residuals are constant; {0} is undefined")]
    Degenerate(TransformKind),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("unknown transform {0:?} (expected minmax, pdf, imr or kde-hazard)")]
    UnknownKind(String),
    #[error("signals do not match the dataset: {0}")]
    Mismatch(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformKind {
    MinMax,
    NormalPdf,
    NormalHazard,
    KdeHazard,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::MinMax,
        TransformKind::NormalPdf,
        TransformKind::NormalHazard,
        TransformKind::KdeHazard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::MinMax => "minmax",
            TransformKind::NormalPdf => "pdf",
            TransformKind::NormalHazard => "imr",
            TransformKind::KdeHazard => "kde-hazard",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TransformError::UnknownKind(s.to_string()))
    }
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    /// Kernel centres.
    pub centers: Vec<f64>,
    /// Weights summing to 1, parallel to `centers`.
    pub weights: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde {
    /// Exact estimate with one kernel per sample.
    pub fn exact(sample: &[f64], bandwidth: f64) -> Self {
        let w = 1.0 / sample.len() as f64;
        Kde {
            centers: sample.to_vec(),
            weights: vec![w; sample.len()],
            bandwidth,
        }
    }

    /// Linear binning of the sample onto `bins` equally spaced centres
    /// spanning its range. Each sample splits its mass between the two
    /// nearest centres in proportion to proximity.
    pub fn binned(sample: &[f64], bandwidth: f64, bins: usize) -> Self {
        let lo = sample.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = bins.max(2);
        let step = (hi - lo) / (bins - 1) as f64;
        let centers: Vec<f64> = (0..bins).map(|k| lo + step * k as f64).collect();
        let mut weights = vec![0.0; bins];
        let w = 1.0 / sample.len() as f64;
        for &x in sample {
            let pos = if step > 0.0 { (x - lo) / step } else { 0.0 };
            let k = (pos.floor() as usize).min(bins - 2);
            let frac = (pos - k as f64).clamp(0.0, 1.0);
            weights[k] += w * (1.0 - frac);
            weights[k + 1] += w * frac;
        }
        Kde {
            centers,
            weights,
            bandwidth,
        }
    }

    pub fn pdf(&self, v: f64) -> f64 {
        let h = self.bandwidth;
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * normal_pdf((v - c) / h))
            .sum::<f64>()
            / h
    }

    /// Exact CDF of the Gaussian mixture.
    pub fn cdf(&self, v: f64) -> f64 {
        let h = self.bandwidth;
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * normal_cdf((v - c) / h))
            .sum()
    }
}

/// Silverman's rule: `0.9 · min(σ̂, IQR/1.34) · n^(−1/5)` with the sample
/// standard deviation and inverse-ECDF quartiles.
pub fn silverman_bandwidth(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    let sd = stats::std_dev(sample, 1);
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedTransform {
    MinMax { min: f64, max: f64 },
    NormalPdf { mean: f64, std: f64 },
    NormalHazard { mean: f64, std: f64 },
    KdeHazard(Kde),
}

/// Transformed value plus whether the CDF floor was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformOutput {
    pub value: f64,
    pub floored: bool,
}

fn floored_ratio(num: f64, den: f64) -> TransformOutput {
    if den < CDF_FLOOR {
        TransformOutput {
            value: num / CDF_FLOOR,
            floored: true,
        }
    } else {
        TransformOutput {
            value: num / den,
            floored: false,
        }
    }
}

impl FittedTransform {
    pub fn kind(&self) -> TransformKind {
        match self {
            FittedTransform::MinMax { .. } => TransformKind::MinMax,
            FittedTransform::NormalPdf { .. } => TransformKind::NormalPdf,
            FittedTransform::NormalHazard { .. } => TransformKind::NormalHazard,
            FittedTransform::KdeHazard(_) => TransformKind::KdeHazard,
        }
    }

    pub fn transform(&self, v: f64) -> Result<f64, TransformError> {
        self.evaluate(v).map(|o| o.value)
    }

    pub fn evaluate(&self, v: f64) -> Result<TransformOutput, TransformError> {
        if !v.is_finite() {
            return Err(TransformError::NonFinite(v));
        }
        let plain = |value| TransformOutput { value, floored: false };
        Ok(match *self {
            FittedTransform::MinMax { min, max } => {
                if max > min {
                    plain(((v - min) / (max - min)).clamp(0.0, 1.0))
                } else {
                    plain(0.0)
                }
            }
            FittedTransform::NormalPdf { mean, std } => plain(normal_pdf((v - mean) / std) / std),
            FittedTransform::NormalHazard { mean, std } => {
                let z = (v - mean) / std;
                floored_ratio(normal_pdf(z) / std, normal_cdf(z))
            }
            FittedTransform::KdeHazard(ref kde) => floored_ratio(kde.pdf(v), kde.cdf(v)),
        })
    }
}

/// Fit a transform to the training residuals.
pub fn fit_transform(kind: TransformKind, residuals: &[f64]) -> Result<FittedTransform, TransformError> {
    if residuals.len() < 2 {
        return Err(TransformError::TooFew(residuals.len()));
    }
    if let Some(&bad) = residuals.iter().find(|v| !v.is_finite()) {
        return Err(TransformError::NonFinite(bad));
    }
    let min = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if kind == TransformKind::MinMax {
        return Ok(FittedTransform::MinMax { min, max });
    }
    if max == min {
        return Err(TransformError::Degenerate(kind));
    }
    let mean = stats::mean(residuals);
    let std = stats::std_dev(residuals, 0);
    Ok(match kind {
        TransformKind::NormalPdf => FittedTransform::NormalPdf { mean, std },
        TransformKind::NormalHazard => FittedTransform::NormalHazard { mean, std },
        TransformKind::KdeHazard => {
            let h = silverman_bandwidth(residuals);
            if residuals.len() > KDE_EXACT_LIMIT {
                FittedTransform::KdeHazard(Kde::binned(residuals, h, KDE_BINS))
            } else {
                FittedTransform::KdeHazard(Kde::exact(residuals, h))
            }
        }
        TransformKind::MinMax => unreachable!(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySignals {
    pub query_id: String,
    pub values: Vec<f64>,
}

/// Control signal per query-document, aligned with a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignals {
    /// `None` for the all-zero signal of an uncorrected ranker.
    pub kind: Option<TransformKind>,
    pub queries: Vec<QuerySignals>,
    /// Number of values whose CDF denominator hit [`CDF_FLOOR`].
    pub floor_hits: usize,
}

impl ControlSignals {
    pub fn zeros(data: &Dataset) -> Self {
        ControlSignals {
            kind: None,
            queries: data
                .queries()
                .iter()
                .map(|q| QuerySignals {
                    query_id: q.query_id.clone(),
                    values: vec![0.0; q.len()],
                })
                .collect(),
            floor_hits: 0,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.queries.iter().flat_map(|q| q.values.iter().copied())
    }

    pub fn check(&self, data: &Dataset) -> Result<(), TransformError> {
        if self.queries.len() != data.n_queries() {
            return Err(TransformError::Mismatch(format!(
                "{} signal blocks for {} queries",
                self.queries.len(),
                data.n_queries()
            )));
        }
        for (s, q) in self.queries.iter().zip(data.queries()) {
            if s.query_id != q.query_id || s.values.len() != q.len() {
                return Err(TransformError::Mismatch(format!(
                    "signals for query {} do not cover query {}",
                    s.query_id, q.query_id
                )));
            }
        }
        Ok(())
    }

    /// TSV `query_id doc_id transform_kind value`.
    pub fn to_tsv(&self, data: &Dataset) -> String {
        let kind = self.kind.map_or("none", TransformKind::name);
        let mut out = String::from("query_id\tdoc_id\ttransform_kind\tvalue\n");
        for (s, q) in self.queries.iter().zip(data.queries()) {
            for (v, d) in s.values.iter().zip(&q.documents) {
                let _ = writeln!(out, "{}\t{}\t{}\t{}", q.query_id, d.doc_id, kind, v);
            }
        }
        out
    }

    pub fn from_tsv(text: &str, data: &Dataset) -> Result<Self, TransformError> {
        let index = crate::clicks::doc_index(data);
        let mut values: Vec<Vec<Option<f64>>> = data.queries().iter().map(|q| vec![None; q.len()]).collect();
        let mut kind: Option<Option<TransformKind>> = None;
        for (line, f) in tsv_rows(text, "query_id") {
            let bad = |msg: String| TransformError::Parse { line, msg };
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let &(qi, di) = index
                .get(&(f[0], f[1]))
                .ok_or_else(|| bad(format!("unknown document {}/{}", f[0], f[1])))?;
            let k = match f[2] {
                "none" => None,
                other => Some(other.parse()?),
            };
            if kind.is_some_and(|prev| prev != k) {
                return Err(bad("mixed transform kinds".into()));
            }
            kind = Some(k);
            let v: f64 = f[3].parse().map_err(|_| bad("bad value".into()))?;
            values[qi][di] = Some(v);
        }
        let queries = data
            .queries()
            .iter()
            .zip(values)
            .map(|(q, vals)| {
                Ok(QuerySignals {
                    query_id: q.query_id.clone(),
                    values: vals
                        .into_iter()
                        .map(|v| {
                            v.ok_or_else(|| TransformError::Mismatch(format!("missing signal in query {}", q.query_id)))
                        })
                        .collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<_, TransformError>>()?;
        Ok(ControlSignals {
            kind: kind.flatten(),
            queries,
            floor_hits: 0,
        })
    }
}

/// Transform every residual of a set with an already fitted transform.
pub fn apply_fitted(fitted: &FittedTransform, residuals: &ResidualSet) -> Result<ControlSignals, TransformError> {
    let mut floor_hits = 0;
    let queries = residuals
        .queries
        .iter()
        .map(|q| {
            let values = q
                .residuals
                .iter()
                .map(|&r| {
                    let out = fitted.evaluate(r)?;
                    floor_hits += usize::from(out.floored);
                    Ok(out.value)
                })
                .collect::<Result<Vec<f64>, TransformError>>()?;
            Ok(QuerySignals {
                query_id: q.query_id.clone(),
                values,
            })
        })
        .collect::<Result<_, TransformError>>()?;
    Ok(ControlSignals {
        kind: Some(fitted.kind()),
        queries,
        floor_hits,
    })
}

/// Fit `kind` on all residuals of the set and transform each of them.
pub fn apply_all(
    kind: TransformKind,
    residuals: &ResidualSet,
) -> Result<(ControlSignals, FittedTransform), TransformError> {
    let flat: Vec<f64> = residuals.values().collect();
    let fitted = fit_transform(kind, &flat)?;
    let signals = apply_fitted(&fitted, residuals)?;
    Ok((signals, fitted))
}
