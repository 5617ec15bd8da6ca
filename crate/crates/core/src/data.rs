//! LTR datasets: the LETOR/SVMlight text format, min-max feature
//! normalization, query-level sampling and a synthetic generator.
//!
//! Text format, one document per line:
//!
//! ```text
//! <rel> qid:<id> <fid>:<val> <fid>:<val> ... [# comment]
//! ```
//!
//! Feature ids are 1-based; absent ids are filled with `0.0`. Lines of one
//! query must be contiguous. The document id is taken from a `docid = X`
//! pair in the comment, else from the first comment token, else from the
//! document's index within its query.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Highest relevance grade of all standard LTR benchmarks.
pub const DEFAULT_REL_MAX: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: query {qid} appears in more than one block")]
    NonContiguousQuery { line: usize, qid: String },
    #[error("input contains no documents")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate query id {0}")]
    DuplicateQuery(String),
    #[error("duplicate document id {doc} in query {query}")]
    DuplicateDocument { query: String, doc: String },
    #[error("query {0} has no documents")]
    EmptyQuery(String),
    #[error("relevance {rel} exceeds rel_max {rel_max}")]
    RelevanceOutOfRange { rel: u8, rel_max: u8 },
    #[error("sampling fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid count: {0}")]
    InvalidCount(&'static str),
}

/// Opaque document identifier, unique within its query.
///
/// Ordering is numeric when both ids are unsigned integers and
/// lexicographic otherwise, so `"2" < "10"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DocId(String);

impl DocId {
    pub fn new(id: impl Into<String>) -> Self {
        DocId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Ord for DocId {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.0.parse::<u64>(), other.0.parse::<u64>()) {
            (Ok(a), Ok(b)) => a.cmp(&b).then_with(|| self.0.cmp(&other.0)),
            _ => self.0.cmp(&other.0),
        }
    }
}

impl PartialOrd for DocId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: DocId,
    pub features: Vec<f64>,
    pub relevance: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub documents: Vec<Document>,
}

impl Query {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// A set of queries sharing one feature dimensionality.
///
/// Constructed through [`Dataset::new`], which checks the invariants; the
/// contents are read-only afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    queries: Vec<Query>,
    feature_dim: usize,
    rel_max: u8,
}

impl Dataset {
    pub fn new(queries: Vec<Query>, feature_dim: usize, rel_max: u8) -> Result<Self, DataError> {
        let mut seen_queries = HashSet::with_capacity(queries.len());
        for q in &queries {
            if !seen_queries.insert(q.query_id.as_str()) {
                return Err(DataError::DuplicateQuery(q.query_id.clone()));
            }
            if q.documents.is_empty() {
                return Err(DataError::EmptyQuery(q.query_id.clone()));
            }
            let mut seen_docs = HashSet::with_capacity(q.documents.len());
            for d in &q.documents {
                if !seen_docs.insert(&d.doc_id) {
                    return Err(DataError::DuplicateDocument {
                        query: q.query_id.clone(),
                        doc: d.doc_id.to_string(),
                    });
                }
                if d.features.len() != feature_dim {
                    return Err(DataError::DimensionMismatch {
                        expected: feature_dim,
                        found: d.features.len(),
                    });
                }
                if d.relevance > rel_max {
                    return Err(DataError::RelevanceOutOfRange {
                        rel: d.relevance,
                        rel_max,
                    });
                }
            }
        }
        Ok(Dataset {
            queries,
            feature_dim,
            rel_max,
        })
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn rel_max(&self) -> u8 {
        self.rel_max
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn n_documents(&self) -> usize {
        self.queries.iter().map(Query::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.queries.iter().flat_map(|q| q.documents.iter())
    }

    /// Keep the queries at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            queries: indices.iter().map(|&i| self.queries[i].clone()).collect(),
            feature_dim: self.feature_dim,
            rel_max: self.rel_max,
        }
    }

    /// Split into the first `n` queries and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.queries.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.queries.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// Count of documents per relevance grade, indexed by grade.
    pub fn relevance_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; usize::from(self.rel_max) + 1];
        for d in self.documents() {
            hist[usize::from(d.relevance)] += 1;
        }
        hist
    }
}

/// Parse LETOR/SVMlight text into a [`Dataset`].
pub fn parse_letor(text: &str) -> Result<Dataset, DataError> {
    type PendingDoc = (DocIdSource, Vec<(usize, f64)>, u8);
    struct Pending {
        query_id: String,
        docs: Vec<PendingDoc>,
    }
    enum DocIdSource {
        Explicit(String),
        Index,
    }

    let mut finished: Vec<Pending> = Vec::new();
    let mut current: Option<Pending> = None;
    let mut closed: HashSet<String> = HashSet::new();
    let mut max_fid = 0usize;
    let mut max_rel = 0u8;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let (body, comment) = match raw.find('#') {
            Some(pos) => (&raw[..pos], Some(raw[pos + 1..].trim())),
            None => (raw, None),
        };
        let mut tokens = body.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let rel = parse_label(label_tok).ok_or_else(|| DataError::Parse {
            line: line_no,
            msg: format!("invalid relevance label {label_tok:?}"),
        })?;
        let qid = tokens
            .next()
            .and_then(|t| t.strip_prefix("qid:"))
            .filter(|q| !q.is_empty())
            .ok_or_else(|| DataError::Parse {
                line: line_no,
                msg: "expected qid:<id> after the label".into(),
            })?;
        let mut feats = Vec::new();
        for tok in tokens {
            let (fid, val) = tok.split_once(':').ok_or_else(|| DataError::Parse {
                line: line_no,
                msg: format!("expected <fid>:<value>, found {tok:?}"),
            })?;
            let fid: usize = fid.parse().ok().filter(|&f| f > 0).ok_or_else(|| DataError::Parse {
                line: line_no,
                msg: format!("feature id {fid:?} is not a positive integer"),
            })?;
            let val: f64 = val.parse().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("feature value {val:?} is not numeric"),
            })?;
            max_fid = max_fid.max(fid);
            feats.push((fid, val));
        }
        max_rel = max_rel.max(rel);
        let source = match comment.and_then(doc_id_from_comment) {
            Some(id) => DocIdSource::Explicit(id),
            None => DocIdSource::Index,
        };

        let same_block = current.as_ref().is_some_and(|c| c.query_id == qid);
        if !same_block {
            if closed.contains(qid) {
                return Err(DataError::NonContiguousQuery {
                    line: line_no,
                    qid: qid.to_string(),
                });
            }
            if let Some(prev) = current.take() {
                closed.insert(prev.query_id.clone());
                finished.push(prev);
            }
            current = Some(Pending {
                query_id: qid.to_string(),
                docs: Vec::new(),
            });
        }
        if let Some(c) = current.as_mut() {
            c.docs.push((source, feats, rel));
        }
    }
    if let Some(prev) = current.take() {
        finished.push(prev);
    }
    if finished.is_empty() {
        return Err(DataError::Empty);
    }

    let queries = finished
        .into_iter()
        .map(|p| Query {
            query_id: p.query_id,
            documents: p
                .docs
                .into_iter()
                .enumerate()
                .map(|(idx, (source, sparse, rel))| {
                    let mut features = vec![0.0; max_fid];
                    for (fid, v) in sparse {
                        features[fid - 1] = v;
                    }
                    let doc_id = match source {
                        DocIdSource::Explicit(s) => DocId(s),
                        DocIdSource::Index => DocId(idx.to_string()),
                    };
                    Document {
                        doc_id,
                        features,
                        relevance: rel,
                    }
                })
                .collect(),
        })
        .collect();
    Dataset::new(queries, max_fid, max_rel.max(DEFAULT_REL_MAX))
}

fn parse_label(tok: &str) -> Option<u8> {
    if let Ok(v) = tok.parse::<u8>() {
        return Some(v);
    }
    let v: f64 = tok.parse().ok()?;
    (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8)
}

fn doc_id_from_comment(comment: &str) -> Option<String> {
    let tokens: Vec<&str> = comment.split_whitespace().collect();
    if let Some(pos) = tokens.iter().position(|t| *t == "docid") {
        if tokens.get(pos + 1) == Some(&"=") {
            return tokens.get(pos + 2).map(|s| s.to_string());
        }
    }
    if let Some(t) = tokens.iter().find_map(|t| t.strip_prefix("docid=")) {
        return Some(t.to_string());
    }
    tokens.first().map(|s| s.to_string())
}

/// Serialize in LETOR format with dense features and a `# <doc_id>` comment.
/// Values use the shortest representation that parses back exactly.
pub fn write_letor(data: &Dataset) -> String {
    use fmt::Write;
    let mut out = String::new();
    for q in &data.queries {
        for d in &q.documents {
            let _ = write!(out, "{} qid:{}", d.relevance, q.query_id);
            for (j, v) in d.features.iter().enumerate() {
                let _ = write!(out, " {}:{}", j + 1, v);
            }
            let _ = writeln!(out, " # {}", d.doc_id);
        }
    }
    out
}

/// Per-feature minimum and maximum observed on a fitting dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, features: &[f64]) -> Result<Vec<f64>, DataError> {
        if features.len() != self.dim() {
            return Err(DataError::DimensionMismatch {
                expected: self.dim(),
                found: features.len(),
            });
        }
        Ok(features
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span > 0.0 {
                    ((v - self.min[j]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Two-column text form: `feature_id min max`, 1-based ids.
    pub fn to_text(&self) -> String {
        let mut out = String::from("feature_id min max\n");
        for j in 0..self.dim() {
            out.push_str(&format!("{} {} {}\n", j + 1, self.min[j], self.max[j]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut min = Vec::new();
        let mut max = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.is_empty() || parts[0] == "feature_id" {
                continue;
            }
            let bad = |msg: &str| DataError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            if parts.len() != 3 {
                return Err(bad("expected `feature_id min max`"));
            }
            let fid: usize = parts[0].parse().map_err(|_| bad("bad feature id"))?;
            if fid != min.len() + 1 {
                return Err(bad("feature ids must be consecutive from 1"));
            }
            let lo: f64 = parts[1].parse().map_err(|_| bad("bad minimum"))?;
            let hi: f64 = parts[2].parse().map_err(|_| bad("bad maximum"))?;
            if lo > hi {
                return Err(bad("minimum exceeds maximum"));
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(FeatureStats { min, max })
    }
}

pub fn fit_normalizer(data: &Dataset) -> Result<FeatureStats, DataError> {
    if data.n_documents() == 0 {
        return Err(DataError::Empty);
    }
    let dim = data.feature_dim;
    let mut min = vec![f64::INFINITY; dim];
    let mut max = vec![f64::NEG_INFINITY; dim];
    for d in data.documents() {
        for (j, &v) in d.features.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(FeatureStats { min, max })
}

pub fn apply_normalizer(data: &Dataset, stats: &FeatureStats) -> Result<Dataset, DataError> {
    if stats.dim() != data.feature_dim {
        return Err(DataError::DimensionMismatch {
            expected: stats.dim(),
            found: data.feature_dim,
        });
    }
    let queries = data
        .queries
        .iter()
        .map(|q| {
            Ok(Query {
                query_id: q.query_id.clone(),
                documents: q
                    .documents
                    .iter()
                    .map(|d| {
                        Ok(Document {
                            doc_id: d.doc_id.clone(),
                            features: stats.normalize(&d.features)?,
                            relevance: d.relevance,
                        })
                    })
                    .collect::<Result<_, DataError>>()?,
            })
        })
        .collect::<Result<_, DataError>>()?;
    Ok(Dataset {
        queries,
        feature_dim: data.feature_dim,
        rel_max: data.rel_max,
    })
}

/// Sample `round(fraction * n)` queries (at least one) without replacement.
/// Both halves keep the input's query order.
pub fn sample_fraction(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = data.n_queries();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        chosen[i] = true;
    }
    let sampled: Vec<usize> = (0..n).filter(|&i| chosen[i]).collect();
    let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    Ok((data.select(&sampled), data.select(&rest)))
}

/// Cumulative share of documents at or below each grade 0..=3; the rest are 4.
const GRADE_QUANTILES: [f64; 4] = [0.40, 0.65, 0.82, 0.93];

/// Synthetic dataset with uniform features and graded relevance.
///
/// With `w ~ N(0, I)` drawn once from the seed and `x ~ U[0,1]^d`:
///
/// ```text
/// latent = w·x / ‖w‖ + 0.5·sin(2π·x₀)·x₁ + 0.15·z,   z ~ N(0,1)
/// ```
///
/// (`x₁` is read as 1 when `d = 1`). Grades come from cutting the pooled
/// latent values at the 40/65/82/93% quantiles, giving roughly
/// 40/25/17/11/7% of documents at grades 0..4. Document ids are `0..n-1`
/// and query ids `1..=n_queries`.
pub fn synth_dataset(
    n_queries: usize,
    docs_per_query: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_queries == 0 {
        return Err(DataError::InvalidCount("n_queries must be positive"));
    }
    if docs_per_query == 0 {
        return Err(DataError::InvalidCount("docs_per_query must be positive"));
    }
    if feature_dim == 0 {
        return Err(DataError::InvalidCount("feature_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);

    let total = n_queries * docs_per_query;
    let mut features = Vec::with_capacity(total);
    let mut latent = Vec::with_capacity(total);
    for _ in 0..total {
        let x: Vec<f64> = (0..feature_dim).map(|_| rng.random::<f64>()).collect();
        let linear: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / norm;
        let x1 = if feature_dim > 1 { x[1] } else { 1.0 };
        let nonlinear = 0.5 * (2.0 * std::f64::consts::PI * x[0]).sin() * x1;
        let noise: f64 = rng.sample(StandardNormal);
        latent.push(linear + nonlinear + 0.15 * noise);
        features.push(x);
    }

    let mut sorted = latent.clone();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = GRADE_QUANTILES
        .iter()
        .map(|&p| {
            let idx = ((p * total as f64).ceil() as usize).clamp(1, total) - 1;
            sorted[idx]
        })
        .collect();

    let mut feats = features.into_iter();
    let queries = (0..n_queries)
        .map(|qi| Query {
            query_id: (qi + 1).to_string(),
            documents: (0..docs_per_query)
                .map(|di| {
                    let l = latent[qi * docs_per_query + di];
                    let grade = cuts.iter().filter(|&&c| l > c).count() as u8;
                    Document {
                        doc_id: DocId(di.to_string()),
                        features: feats.next().expect("one feature row per document"),
                        relevance: grade,
                    }
                })
                .collect(),
        })
        .collect();
    Dataset::new(queries, feature_dim, DEFAULT_REL_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_single_line_with_gap_and_comment() {
        let ds = parse_letor("2 qid:10 1:0.5 3:0.3 # d0").unwrap();
        assert_eq!(ds.n_queries(), 1);
        let q = &ds.queries()[0];
        assert_eq!(q.query_id, "10");
        assert_eq!(q.documents[0].relevance, 2);
        assert_eq!(q.documents[0].features, vec![0.5, 0.0, 0.3]);
        assert_eq!(q.documents[0].doc_id.as_str(), "d0");
        assert_eq!(ds.feature_dim(), 3);
        assert_eq!(ds.rel_max(), 4);
    }

    #[test]
    fn interleaved_query_blocks_are_rejected() {
        let err = parse_letor("1 qid:1 1:0\n0 qid:2 1:1\n2 qid:1 1:3\n").unwrap_err();
        assert_eq!(
            err,
            DataError::NonContiguousQuery {
                line: 3,
                qid: "1".into()
            }
        );
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        assert!(matches!(
            parse_letor("abc qid:1 1:0"),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_letor("1 qid:1 1:0\n1 qid:1 1:x"),
            Err(DataError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_letor("1 qid:1 0:1"),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_letor("1 1:0.2"), Err(DataError::Parse { .. })));
        assert_eq!(parse_letor("\n  \n# only comment\n"), Err(DataError::Empty));
    }

    #[test]
    fn doc_ids_from_letor4_comments_and_fallback_index() {
        let ds = parse_letor(
            "0 qid:5 1:1 #docid = GX001 inc = 1\n1 qid:5 1:2 #docid = GX002 inc = 1\n0 qid:6 1:0\n0 qid:6 1:1\n",
        )
        .unwrap();
        assert_eq!(ds.queries()[0].documents[1].doc_id.as_str(), "GX002");
        assert_eq!(ds.queries()[1].documents[1].doc_id.as_str(), "1");
    }

    #[test]
    fn larger_labels_raise_rel_max() {
        let ds = parse_letor("6 qid:1 1:0\n0 qid:1 1:1").unwrap();
        assert_eq!(ds.rel_max(), 6);
    }

    #[test]
    fn doc_id_order_is_numeric_aware() {
        assert!(DocId::new("2") < DocId::new("10"));
        assert!(DocId::new("a10") < DocId::new("a2"));
    }

    fn column_dataset(col: &[f64]) -> Dataset {
        let docs = col
            .iter()
            .enumerate()
            .map(|(i, &v)| Document {
                doc_id: DocId::new(i.to_string()),
                features: vec![v],
                relevance: 0,
            })
            .collect();
        Dataset::new(
            vec![Query {
                query_id: "1".into(),
                documents: docs,
            }],
            1,
            4,
        )
        .unwrap()
    }

    #[test]
    fn normalizer_endpoints_degenerate_and_clamp() {
        let ds = column_dataset(&[2.0, 4.0, 6.0]);
        let stats = fit_normalizer(&ds).unwrap();
        let out = apply_normalizer(&ds, &stats).unwrap();
        let vals: Vec<f64> = out.documents().map(|d| d.features[0]).collect();
        assert_eq!(vals, vec![0.0, 0.5, 1.0]);

        let flat = column_dataset(&[5.0, 5.0]);
        let stats = fit_normalizer(&flat).unwrap();
        let out = apply_normalizer(&flat, &stats).unwrap();
        assert!(out.documents().all(|d| d.features[0] == 0.0));

        let stats = FeatureStats {
            min: vec![0.0],
            max: vec![10.0],
        };
        assert_eq!(stats.normalize(&[12.0]).unwrap(), vec![1.0]);
        assert_eq!(stats.normalize(&[-3.0]).unwrap(), vec![0.0]);
        assert!(matches!(
            stats.normalize(&[1.0, 2.0]),
            Err(DataError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stats_text_round_trip() {
        let stats = FeatureStats {
            min: vec![0.0, -1.5],
            max: vec![10.0, 2.25],
        };
        assert_eq!(FeatureStats::from_text(&stats.to_text()).unwrap(), stats);
    }

    #[test]
    fn sample_fraction_counts_and_determinism() {
        let ds = synth_dataset(100, 3, 2, 1).unwrap();
        let (s, r) = sample_fraction(&ds, 0.01, 9).unwrap();
        assert_eq!((s.n_queries(), r.n_queries()), (1, 99));
        let (s, r) = sample_fraction(&ds, 1.0, 9).unwrap();
        assert_eq!((s.n_queries(), r.n_queries()), (100, 0));
        let a = sample_fraction(&ds, 0.3, 4).unwrap();
        let b = sample_fraction(&ds, 0.3, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            sample_fraction(&ds, 0.0, 1).unwrap_err(),
            DataError::InvalidFraction(0.0)
        );
        assert!(sample_fraction(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn synth_shape_and_grades() {
        let ds = synth_dataset(50, 20, 10, 7).unwrap();
        assert_eq!(ds.n_queries(), 50);
        assert!(ds.queries().iter().all(|q| q.len() == 20));
        assert!(ds
            .documents()
            .all(|d| d.features.iter().all(|v| (0.0..=1.0).contains(v))));
        let hist = ds.relevance_histogram();
        assert!(hist.iter().filter(|&&c| c > 0).count() >= 3, "{hist:?}");
        assert_eq!(write_letor(&ds), write_letor(&synth_dataset(50, 20, 10, 7).unwrap()));
        assert!(synth_dataset(0, 1, 1, 0).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..4, 1usize..6).prop_flat_map(|(dim, nq)| {
            prop::collection::vec(
                prop::collection::vec((prop::collection::vec(-1e6f64..1e6, dim), 0u8..=4), 1..5),
                nq,
            )
            .prop_map(move |qs| {
                let queries = qs
                    .into_iter()
                    .enumerate()
                    .map(|(qi, docs)| Query {
                        query_id: format!("q{qi}"),
                        documents: docs
                            .into_iter()
                            .enumerate()
                            .map(|(di, (features, relevance))| Document {
                                doc_id: DocId::new(format!("d{di}")),
                                features,
                                relevance,
                            })
                            .collect(),
                    })
                    .collect();
                Dataset::new(queries, dim, 4).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn letor_round_trip(ds in arb_dataset()) {
            let text = write_letor(&ds);
            let back = parse_letor(&text).unwrap();
            // Trailing all-zero columns cannot be recovered from sparse text,
            // but dense output always writes every column.
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn normalized_values_in_unit_interval(ds in arb_dataset(), other in arb_dataset()) {
            let stats = fit_normalizer(&ds).unwrap();
            if other.feature_dim() == ds.feature_dim() {
                let out = apply_normalizer(&other, &stats).unwrap();
                prop_assert!(out.documents().all(|d| d.features.iter().all(|v| (0.0..=1.0).contains(v))));
            }
        }

        #[test]
        fn sample_fraction_partitions(n in 1usize..40, fraction in 0.001f64..=1.0, seed in any::<u64>()) {
            let ds = synth_dataset(n, 2, 1, 3).unwrap();
            let (s, r) = sample_fraction(&ds, fraction, seed).unwrap();
            let mut ids: Vec<&str> = s.queries().iter().chain(r.queries()).map(|q| q.query_id.as_str()).collect();
            prop_assert_eq!(ids.len(), n);
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            prop_assert!(s.n_queries() >= 1);
        }
    }
}
