//! Logged rankings and position-biased click simulation.
//!
//! A linear pairwise ranker produces the logged order of every query. Clicks
//! then follow the position-based model: a document is clicked when it is
//! observed, with probability `(1/r)^η` at position `r`, and perceived as
//! relevant, with probability `ϵ + (1 − ϵ)(2^rel − 1)/(2^rel_max − 1)`.

use std::collections::HashMap;
use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::util::{keyed_rng, tsv_rows};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClickError {
    #[error("no query has two documents with different relevance")]
    NoTrainablePairs,
    #[error("dimension mismatch: ranker has {expected} weights, data has {found} features")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("position must be >= 1, got {0}")]
    InvalidPosition(u32),
    #[error("invalid probability input: {0}")]
    InvalidInput(String),
    #[error("rankings or clicks do not match the dataset: {0}")]
    Mismatch(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRanker {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearRanker {
    pub fn score(&self, features: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()
    }
}

/// Pairwise hinge-loss ranker trained by stochastic subgradient descent.
///
/// Every within-query pair with `rel_i > rel_j` is visited once per epoch in
/// a seeded random order; when `s_i − s_j < 1` the weights move by
/// `step_size · (x_i − x_j)`. The bias cancels in pairwise differences and
/// stays 0.
pub fn train_initial_ranker(
    data: &Dataset,
    epochs: usize,
    step_size: f64,
    seed: u64,
) -> Result<LinearRanker, ClickError> {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (qi, q) in data.queries().iter().enumerate() {
        for (i, a) in q.documents.iter().enumerate() {
            for (j, b) in q.documents.iter().enumerate() {
                if a.relevance > b.relevance {
                    pairs.push((qi, i, j));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(ClickError::NoTrainablePairs);
    }
    let dim = data.feature_dim();
    let mut w = vec![0.0; dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diff = vec![0.0; dim];
    for _ in 0..epochs {
        pairs.shuffle(&mut rng);
        for &(qi, i, j) in &pairs {
            let docs = &data.queries()[qi].documents;
            for ((d, a), b) in diff.iter_mut().zip(&docs[i].features).zip(&docs[j].features) {
                *d = a - b;
            }
            let margin: f64 = w.iter().zip(&diff).map(|(w, d)| w * d).sum();
            if margin < 1.0 {
                for (wk, d) in w.iter_mut().zip(&diff) {
                    *wk += step_size * d;
                }
            }
        }
    }
    Ok(LinearRanker { weights: w, bias: 0.0 })
}

/// Logged presentation order of one query. `positions[i]` is the 1-based
/// position of the query's `i`-th document.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query_id: String,
    pub positions: Vec<u32>,
}

impl QueryRanking {
    /// Document indices in presented order.
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.positions.len()];
        for (doc, &pos) in self.positions.iter().enumerate() {
            order[pos as usize - 1] = doc;
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedLists {
    pub lists: Vec<QueryRanking>,
}

impl RankedLists {
    /// Checks that the lists align with `data` query by query and that each
    /// list is a permutation of `1..=n_q`.
    pub fn check(&self, data: &Dataset) -> Result<(), ClickError> {
        if self.lists.len() != data.n_queries() {
            return Err(ClickError::Mismatch(format!(
                "{} ranked lists for {} queries",
                self.lists.len(),
                data.n_queries()
            )));
        }
        for (l, q) in self.lists.iter().zip(data.queries()) {
            if l.query_id != q.query_id || l.positions.len() != q.len() {
                return Err(ClickError::Mismatch(format!(
                    "ranking for query {} does not cover query {}",
                    l.query_id, q.query_id
                )));
            }
            let mut seen = vec![false; q.len()];
            for &p in &l.positions {
                let slot = (p as usize).checked_sub(1).filter(|&s| s < seen.len());
                match slot {
                    Some(s) if !seen[s] => seen[s] = true,
                    _ => {
                        return Err(ClickError::Mismatch(format!(
                            "positions of query {} are not a permutation",
                            q.query_id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rank every query by descending score; ties go to the smaller doc id.
pub fn rank_with(ranker: &LinearRanker, data: &Dataset) -> Result<RankedLists, ClickError> {
    if ranker.weights.len() != data.feature_dim() {
        return Err(ClickError::DimensionMismatch {
            expected: ranker.weights.len(),
            found: data.feature_dim(),
        });
    }
    let lists = data
        .queries()
        .iter()
        .map(|q| {
            let scores: Vec<f64> = q.documents.iter().map(|d| ranker.score(&d.features)).collect();
            let mut order: Vec<usize> = (0..q.len()).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .total_cmp(&scores[a])
                    .then_with(|| q.documents[a].doc_id.cmp(&q.documents[b].doc_id))
            });
            let mut positions = vec![0u32; q.len()];
            for (rank, &doc) in order.iter().enumerate() {
                positions[doc] = rank as u32 + 1;
            }
            QueryRanking {
                query_id: q.query_id.clone(),
                positions,
            }
        })
        .collect();
    Ok(RankedLists { lists })
}

pub fn observation_prob(position: u32, eta: f64) -> Result<f64, ClickError> {
    if position < 1 {
        return Err(ClickError::InvalidPosition(position));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(ClickError::InvalidInput(format!("eta = {eta}")));
    }
    Ok((1.0 / f64::from(position)).powf(eta))
}

pub fn relevance_prob(rel: u8, rel_max: u8, eps_noise: f64) -> Result<f64, ClickError> {
    if rel > rel_max || rel_max == 0 {
        return Err(ClickError::InvalidInput(format!(
            "relevance {rel} with rel_max {rel_max}"
        )));
    }
    if !(0.0..=1.0).contains(&eps_noise) {
        return Err(ClickError::InvalidInput(format!("noise = {eps_noise}")));
    }
    let gain = (2f64.powi(i32::from(rel)) - 1.0) / (2f64.powi(i32::from(rel_max)) - 1.0);
    Ok(eps_noise + (1.0 - eps_noise) * gain)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Position bias severity.
    pub eta: f64,
    /// Probability that an irrelevant document is perceived as relevant.
    pub eps_noise: f64,
    pub passes: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ClickError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(ClickError::InvalidInput(format!("eta = {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.eps_noise) {
            return Err(ClickError::InvalidInput(format!("noise = {}", self.eps_noise)));
        }
        if self.passes == 0 {
            return Err(ClickError::InvalidInput("passes must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            eta: 1.0,
            eps_noise: 0.0,
            passes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryClicks {
    pub query_id: String,
    pub positions: Vec<u32>,
    /// `clicks[doc][pass]`.
    pub clicks: Vec<Vec<bool>>,
}

/// Per-pass click bits for every document of a dataset, aligned with its
/// query and document order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickLog {
    pub passes: usize,
    pub queries: Vec<QueryClicks>,
}

impl ClickLog {
    pub fn total_clicks(&self) -> usize {
        self.queries
            .iter()
            .flat_map(|q| q.clicks.iter())
            .map(|c| c.iter().filter(|&&b| b).count())
            .sum()
    }

    /// Fraction of passes in which each document was clicked.
    pub fn click_rates(&self) -> Vec<Vec<f64>> {
        self.queries
            .iter()
            .map(|q| {
                q.clicks
                    .iter()
                    .map(|c| c.iter().filter(|&&b| b).count() as f64 / self.passes as f64)
                    .collect()
            })
            .collect()
    }

    pub fn check(&self, data: &Dataset) -> Result<(), ClickError> {
        if self.queries.len() != data.n_queries() {
            return Err(ClickError::Mismatch(format!(
                "{} click blocks for {} queries",
                self.queries.len(),
                data.n_queries()
            )));
        }
        for (c, q) in self.queries.iter().zip(data.queries()) {
            if c.query_id != q.query_id || c.clicks.len() != q.len() || c.positions.len() != q.len() {
                return Err(ClickError::Mismatch(format!(
                    "clicks for query {} do not cover query {}",
                    c.query_id, q.query_id
                )));
            }
            if c.clicks.iter().any(|bits| bits.len() != self.passes) {
                return Err(ClickError::Mismatch(format!(
                    "query {} has a click sequence of the wrong length",
                    q.query_id
                )));
            }
        }
        Ok(())
    }

    /// Logged rankings recorded alongside the clicks.
    pub fn ranked_lists(&self) -> RankedLists {
        RankedLists {
            lists: self
                .queries
                .iter()
                .map(|q| QueryRanking {
                    query_id: q.query_id.clone(),
                    positions: q.positions.clone(),
                })
                .collect(),
        }
    }

    /// TSV with header `query_id doc_id position pass clicked`, one row per
    /// document and pass. Passes are numbered from 1.
    pub fn to_tsv(&self, data: &Dataset) -> String {
        let mut out = String::from("query_id\tdoc_id\tposition\tpass\tclicked\n");
        for (c, q) in self.queries.iter().zip(data.queries()) {
            for (d, doc) in q.documents.iter().enumerate() {
                for (p, &bit) in c.clicks[d].iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t{}",
                        q.query_id,
                        doc.doc_id,
                        c.positions[d],
                        p + 1,
                        u8::from(bit)
                    );
                }
            }
        }
        out
    }

    /// Read a TSV written by [`ClickLog::to_tsv`] and align it with `data`.
    pub fn from_tsv(text: &str, data: &Dataset) -> Result<ClickLog, ClickError> {
        let index = doc_index(data);
        let mut positions: Vec<Vec<Option<u32>>> = data.queries().iter().map(|q| vec![None; q.len()]).collect();
        let mut bits: Vec<Vec<Vec<Option<bool>>>> = data.queries().iter().map(|q| vec![Vec::new(); q.len()]).collect();
        let mut passes = 0usize;
        for (line, f) in tsv_rows(text, "query_id") {
            let bad = |msg: String| ClickError::Parse { line, msg };
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let &(qi, di) = index
                .get(&(f[0], f[1]))
                .ok_or_else(|| bad(format!("unknown document {}/{}", f[0], f[1])))?;
            let pos: u32 = f[2].parse().map_err(|_| bad("bad position".into()))?;
            let pass: usize = f[3]
                .parse()
                .ok()
                .filter(|&p| p >= 1)
                .ok_or_else(|| bad("bad pass number".into()))?;
            let clicked = match f[4] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("clicked must be 0/1, found {other}"))),
            };
            match positions[qi][di] {
                Some(p) if p != pos => return Err(bad("inconsistent position".into())),
                _ => positions[qi][di] = Some(pos),
            }
            let seq = &mut bits[qi][di];
            if seq.len() < pass {
                seq.resize(pass, None);
            }
            seq[pass - 1] = Some(clicked);
            passes = passes.max(pass);
        }
        let mut queries = Vec::with_capacity(data.n_queries());
        for (qi, q) in data.queries().iter().enumerate() {
            let mut pos_out = Vec::with_capacity(q.len());
            let mut clicks_out = Vec::with_capacity(q.len());
            for di in 0..q.len() {
                let missing = || {
                    ClickError::Mismatch(format!(
                        "missing clicks for document {}/{}",
                        q.query_id, q.documents[di].doc_id
                    ))
                };
                pos_out.push(positions[qi][di].ok_or_else(missing)?);
                let seq = &bits[qi][di];
                if seq.len() != passes {
                    return Err(missing());
                }
                clicks_out.push(
                    seq.iter()
                        .map(|b| b.ok_or_else(missing))
                        .collect::<Result<Vec<bool>, _>>()?,
                );
            }
            queries.push(QueryClicks {
                query_id: q.query_id.clone(),
                positions: pos_out,
                clicks: clicks_out,
            });
        }
        let log = ClickLog { passes, queries };
        log.ranked_lists().check(data)?;
        Ok(log)
    }
}

pub(crate) fn doc_index(data: &Dataset) -> HashMap<(&str, &str), (usize, usize)> {
    let mut index = HashMap::with_capacity(data.n_documents());
    for (qi, q) in data.queries().iter().enumerate() {
        for (di, d) in q.documents.iter().enumerate() {
            index.insert((q.query_id.as_str(), d.doc_id.as_str()), (qi, di));
        }
    }
    index
}

/// Simulate `cfg.passes` independent passes of position-biased clicks.
///
/// Each query draws from its own stream keyed by `(cfg.seed, query_id)`, so
/// the result does not depend on query order or on which other queries are
/// simulated.
pub fn simulate_clicks(lists: &RankedLists, data: &Dataset, cfg: &SimConfig) -> Result<ClickLog, ClickError> {
    lists.check(data)?;
    cfg.validate()?;
    let queries = lists
        .lists
        .iter()
        .zip(data.queries())
        .map(|(l, q)| {
            let probs = q
                .documents
                .iter()
                .zip(&l.positions)
                .map(|(d, &pos)| {
                    Ok(observation_prob(pos, cfg.eta)? * relevance_prob(d.relevance, data.rel_max(), cfg.eps_noise)?)
                })
                .collect::<Result<Vec<f64>, ClickError>>()?;
            let mut rng = keyed_rng(cfg.seed, &q.query_id);
            let mut clicks = vec![Vec::with_capacity(cfg.passes); q.len()];
            for _ in 0..cfg.passes {
                for (bits, &p) in clicks.iter_mut().zip(&probs) {
                    bits.push(rng.random::<f64>() < p);
                }
            }
            Ok(QueryClicks {
                query_id: q.query_id.clone(),
                positions: l.positions.clone(),
                clicks,
            })
        })
        .collect::<Result<Vec<_>, ClickError>>()?;
    Ok(ClickLog {
        passes: cfg.passes,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DocId, Document, Query};

    fn dataset(docs: Vec<(Vec<f64>, u8)>) -> Dataset {
        let dim = docs[0].0.len();
        Dataset::new(
            vec![Query {
                query_id: "1".into(),
                documents: docs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (features, relevance))| Document {
                        doc_id: DocId::new(i.to_string()),
                        features,
                        relevance,
                    })
                    .collect(),
            }],
            dim,
            4,
        )
        .unwrap()
    }

    #[test]
    fn probabilities() {
        assert_eq!(observation_prob(1, 1.7).unwrap(), 1.0);
        assert_eq!(observation_prob(2, 1.0).unwrap(), 0.5);
        assert_eq!(observation_prob(4, 2.0).unwrap(), 0.0625);
        assert_eq!(observation_prob(0, 1.0), Err(ClickError::InvalidPosition(0)));
        assert_eq!(relevance_prob(4, 4, 0.0).unwrap(), 1.0);
        assert!((relevance_prob(0, 4, 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert!((relevance_prob(2, 4, 0.1).unwrap() - 0.28).abs() < 1e-15);
        assert!(relevance_prob(5, 4, 0.0).is_err());
        assert!(relevance_prob(1, 4, 1.5).is_err());
    }

    #[test]
    fn initial_ranker_learns_only_direction() {
        let ds = dataset(vec![(vec![1.0], 1), (vec![0.0], 0)]);
        let r = train_initial_ranker(&ds, 5, 0.1, 3).unwrap();
        assert!(r.weights[0] > 0.0);
        assert_eq!(r, train_initial_ranker(&ds, 5, 0.1, 3).unwrap());
        let flat = dataset(vec![(vec![1.0], 2), (vec![0.0], 2)]);
        assert_eq!(
            train_initial_ranker(&flat, 5, 0.1, 3),
            Err(ClickError::NoTrainablePairs)
        );
    }

    #[test]
    fn rank_with_sorts_and_breaks_ties_by_doc_id() {
        let ds = dataset(vec![(vec![0.2], 0), (vec![0.9], 0), (vec![0.5], 0)]);
        let r = LinearRanker {
            weights: vec![1.0],
            bias: 0.0,
        };
        let lists = rank_with(&r, &ds).unwrap();
        assert_eq!(lists.lists[0].positions, vec![3, 1, 2]);
        assert_eq!(lists.lists[0].order(), vec![1, 2, 0]);

        let zero = LinearRanker {
            weights: vec![0.0],
            bias: 0.0,
        };
        assert_eq!(rank_with(&zero, &ds).unwrap().lists[0].positions, vec![1, 2, 3]);

        let wrong = LinearRanker {
            weights: vec![1.0, 1.0],
            bias: 0.0,
        };
        assert!(matches!(
            rank_with(&wrong, &ds),
            Err(ClickError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rank_with_is_invariant_to_input_order() {
        let a = dataset(vec![(vec![0.2], 0), (vec![0.9], 0), (vec![0.5], 0)]);
        let q = &a.queries()[0];
        let permuted = Dataset::new(
            vec![Query {
                query_id: "1".into(),
                documents: vec![q.documents[2].clone(), q.documents[0].clone(), q.documents[1].clone()],
            }],
            1,
            4,
        )
        .unwrap();
        let r = LinearRanker {
            weights: vec![1.0],
            bias: 0.0,
        };
        let pa = rank_with(&r, &a).unwrap().lists[0].positions.clone();
        let pb = rank_with(&r, &permuted).unwrap().lists[0].positions.clone();
        assert_eq!(pb, vec![pa[2], pa[0], pa[1]]);
    }

    #[test]
    fn extreme_click_probabilities() {
        let ds = dataset(vec![(vec![1.0], 4), (vec![0.0], 0)]);
        let lists = RankedLists {
            lists: vec![QueryRanking {
                query_id: "1".into(),
                positions: vec![1, 2],
            }],
        };
        let log = simulate_clicks(&lists, &ds, &SimConfig::default()).unwrap();
        assert!(log.queries[0].clicks[0].iter().all(|&b| b));
        assert!(log.queries[0].clicks[1].iter().all(|&b| !b));
    }

    #[test]
    fn click_rate_at_position_two() {
        let ds = dataset(vec![(vec![1.0], 0), (vec![0.0], 4)]);
        let lists = RankedLists {
            lists: vec![QueryRanking {
                query_id: "1".into(),
                positions: vec![1, 2],
            }],
        };
        let cfg = SimConfig {
            passes: 10_000,
            seed: 11,
            ..SimConfig::default()
        };
        let log = simulate_clicks(&lists, &ds, &cfg).unwrap();
        let rate = log.click_rates()[0][1];
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn tsv_round_trip_and_mismatch() {
        let ds = crate::data::synth_dataset(3, 4, 2, 5).unwrap();
        let r = LinearRanker {
            weights: vec![1.0, -0.5],
            bias: 0.0,
        };
        let lists = rank_with(&r, &ds).unwrap();
        let cfg = SimConfig {
            passes: 3,
            seed: 2,
            ..SimConfig::default()
        };
        let log = simulate_clicks(&lists, &ds, &cfg).unwrap();
        let back = ClickLog::from_tsv(&log.to_tsv(&ds), &ds).unwrap();
        assert_eq!(back, log);

        let other = crate::data::synth_dataset(2, 4, 2, 5).unwrap();
        assert!(simulate_clicks(&lists, &other, &cfg).is_err());
        let truncated: String = log.to_tsv(&ds).lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(ClickLog::from_tsv(&truncated, &ds).is_err());
    }
}
