//! NDCG@p and ERR@p against graded relevance or continuous proxy gains, and
//! the paired Fisher randomization test.

use std::fmt;
use std::fmt::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::gbdt::{GbdtError, RankerEnsemble};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("cutoff must be >= 1")]
    ZeroCutoff,
    #[error("no cutoffs configured")]
    NoCutoffs,
    #[error("relevance {rel} exceeds rel_max {rel_max}")]
    RelevanceOutOfRange { rel: u8, rel_max: u8 },
    #[error("empty dataset")]
    Empty,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("need at least 2 paired observations")]
    TooFew,
    #[error(transparent)]
    Model(#[from] GbdtError),
}

/// Gain of a graded document, `2^rel − 1`.
pub fn relevance_gain(rel: u8) -> f64 {
    2f64.powi(i32::from(rel)) - 1.0
}

fn dcg(gains: &[f64], p: usize) -> f64 {
    gains
        .iter()
        .take(p)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@p of gains listed in presented order. The ideal order is the gains
/// sorted descending. Returns `None` when the ideal DCG is zero.
pub fn ndcg_at(ranked_gains: &[f64], p: usize) -> Result<Option<f64>, MetricError> {
    if p == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    let mut ideal = ranked_gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal, p);
    if idcg <= 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg(ranked_gains, p) / idcg))
}

/// ERR@p with stopping probabilities `R = (2^rel − 1) / 2^rel_max`.
pub fn err_at(ranked_rels: &[u8], p: usize, rel_max: u8) -> Result<f64, MetricError> {
    if p == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    let denom = 2f64.powi(i32::from(rel_max));
    let mut not_stopped = 1.0;
    let mut err = 0.0;
    for (i, &rel) in ranked_rels.iter().enumerate() {
        if rel > rel_max {
            return Err(MetricError::RelevanceOutOfRange { rel, rel_max });
        }
        if i >= p {
            continue;
        }
        let r = relevance_gain(rel) / denom;
        err += not_stopped * r / (i + 1) as f64;
        not_stopped *= 1.0 - r;
    }
    Ok(err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Ndcg,
    Err,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Ndcg => "ndcg",
            MetricKind::Err => "err",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricConfig {
    pub cutoffs: Vec<usize>,
    pub rel_max: u8,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            cutoffs: vec![5, 10, 15],
            rel_max: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSeries {
    pub metric: MetricKind,
    pub cutoff: usize,
    pub mean: f64,
    /// One value per evaluated query, parallel to [`EvalReport::query_ids`].
    pub per_query: Vec<f64>,
}

/// Metric means with the per-query values they were computed from. Queries
/// whose documents are all irrelevant are skipped for every metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub query_ids: Vec<String>,
    pub n_skipped: usize,
    pub series: Vec<MetricSeries>,
}

impl EvalReport {
    pub fn get(&self, metric: MetricKind, cutoff: usize) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.metric == metric && s.cutoff == cutoff)
    }

    pub fn mean(&self, metric: MetricKind, cutoff: usize) -> Option<f64> {
        self.get(metric, cutoff).map(|s| s.mean)
    }

    /// CSV `metric,cutoff,mean,n_queries,n_skipped`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,cutoff,mean,n_queries,n_skipped\n");
        for s in &self.series {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.metric,
                s.cutoff,
                s.mean,
                s.per_query.len(),
                self.n_skipped
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Document indices of a query sorted by descending score, ties broken by
/// doc id.
pub fn rank_documents(data: &Dataset, query: usize, scores: &[f64]) -> Vec<usize> {
    let docs = &data.queries()[query].documents;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| docs[a].doc_id.cmp(&docs[b].doc_id))
    });
    order
}

/// Inference scores (control slot 0) for every document of `data`.
pub fn score_dataset(model: &RankerEnsemble, data: &Dataset) -> Result<Vec<Vec<f64>>, MetricError> {
    data.queries()
        .iter()
        .map(|q| {
            q.documents
                .iter()
                .map(|d| model.predict(&d.features, 0.0).map_err(MetricError::from))
                .collect()
        })
        .collect()
}

/// Evaluate arbitrary per-document scores against the true relevance.
pub fn evaluate_scores(data: &Dataset, scores: &[Vec<f64>], cfg: &MetricConfig) -> Result<EvalReport, MetricError> {
    if data.is_empty() {
        return Err(MetricError::Empty);
    }
    if cfg.cutoffs.is_empty() {
        return Err(MetricError::NoCutoffs);
    }
    if cfg.cutoffs.contains(&0) {
        return Err(MetricError::ZeroCutoff);
    }
    if scores.len() != data.n_queries() {
        return Err(MetricError::LengthMismatch(format!(
            "{} score lists for {} queries",
            scores.len(),
            data.n_queries()
        )));
    }
    let mut series: Vec<MetricSeries> = [MetricKind::Ndcg, MetricKind::Err]
        .into_iter()
        .flat_map(|m| {
            cfg.cutoffs.iter().map(move |&cutoff| MetricSeries {
                metric: m,
                cutoff,
                mean: 0.0,
                per_query: Vec::new(),
            })
        })
        .collect();
    let mut query_ids = Vec::new();
    let mut n_skipped = 0;
    for (qi, q) in data.queries().iter().enumerate() {
        if scores[qi].len() != q.len() {
            return Err(MetricError::LengthMismatch(format!(
                "query {} has {} documents but {} scores",
                q.query_id,
                q.len(),
                scores[qi].len()
            )));
        }
        if q.documents.iter().all(|d| d.relevance == 0) {
            n_skipped += 1;
            continue;
        }
        let order = rank_documents(data, qi, &scores[qi]);
        let rels: Vec<u8> = order.iter().map(|&i| q.documents[i].relevance).collect();
        let gains: Vec<f64> = rels.iter().map(|&r| relevance_gain(r)).collect();
        for s in series.iter_mut() {
            let v = match s.metric {
                MetricKind::Ndcg => ndcg_at(&gains, s.cutoff)?.unwrap_or(0.0),
                MetricKind::Err => err_at(&rels, s.cutoff, cfg.rel_max)?,
            };
            s.per_query.push(v);
        }
        query_ids.push(q.query_id.clone());
    }
    for s in series.iter_mut() {
        s.mean = if s.per_query.is_empty() {
            0.0
        } else {
            s.per_query.iter().sum::<f64>() / s.per_query.len() as f64
        };
    }
    Ok(EvalReport {
        query_ids,
        n_skipped,
        series,
    })
}

/// Evaluate a ranker at inference (control 0) against the true relevance.
pub fn evaluate(model: &RankerEnsemble, data: &Dataset, cfg: &MetricConfig) -> Result<EvalReport, MetricError> {
    let scores = score_dataset(model, data)?;
    evaluate_scores(data, &scores, cfg)
}

/// Mean NDCG@p of `scores` against continuous per-document gains. Gains are
/// shifted by their per-query minimum so they are non-negative; queries whose
/// shifted gains are all zero are skipped. Returns `None` if every query is
/// skipped.
pub fn mean_ndcg_with_gains(
    data: &Dataset,
    scores: &[Vec<f64>],
    gains: &[Vec<f64>],
    p: usize,
) -> Result<Option<f64>, MetricError> {
    if scores.len() != data.n_queries() || gains.len() != data.n_queries() {
        return Err(MetricError::LengthMismatch(
            "scores/gains do not cover the dataset".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for qi in 0..data.n_queries() {
        let g = &gains[qi];
        if g.len() != scores[qi].len() || g.len() != data.queries()[qi].len() {
            return Err(MetricError::LengthMismatch(format!("query index {qi}")));
        }
        let min = g.iter().copied().fold(f64::INFINITY, f64::min);
        let order = rank_documents(data, qi, &scores[qi]);
        let ranked: Vec<f64> = order.iter().map(|&i| g[i] - min).collect();
        if let Some(v) = ndcg_at(&ranked, p)? {
            total += v;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Mean NDCG@p of `scores` against the true relevance grades, skipping
/// queries without relevant documents.
pub fn mean_ndcg(data: &Dataset, scores: &[Vec<f64>], p: usize) -> Result<Option<f64>, MetricError> {
    let gains: Vec<Vec<f64>> = data
        .queries()
        .iter()
        .map(|q| q.documents.iter().map(|d| relevance_gain(d.relevance)).collect())
        .collect();
    mean_ndcg_with_gains(data, scores, &gains, p)
}

fn mean_signed(diffs: &[f64], signs: Option<&[bool]>) -> f64 {
    let mut s = 0.0;
    for (i, d) in diffs.iter().enumerate() {
        match signs {
            Some(flip) if flip[i] => s -= d,
            _ => s += d,
        }
    }
    s / diffs.len() as f64
}

/// Two-sided paired randomization test of `mean(a) − mean(b)`: each
/// permutation swaps `a_q` and `b_q` with probability ½ per query, and
/// `p = (1 + #{|Δ_perm| ≥ |Δ|}) / (1 + n_perm)`.
pub fn fisher_randomization(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(MetricError::TooFew);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = mean_signed(&diffs, None).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips = vec![false; diffs.len()];
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        for f in flips.iter_mut() {
            *f = rng.random::<bool>();
        }
        if mean_signed(&diffs, Some(&flips)).abs() >= observed {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + n_perm) as f64)
}
