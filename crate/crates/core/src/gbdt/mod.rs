//! Gradient-boosted regression trees: a LambdaMART ranking objective for the
//! second stage and a squared-error objective for first-stage regression.
//!
//! Ranking models take the document features followed by one control-signal
//! slot. At inference the slot is filled with 0 unless a caller asks
//! otherwise.

mod lambdarank;
mod tree;

use std::fmt::Write;

use thiserror::Error;

pub use lambdarank::{
    group_lambdas, pairwise_logistic_loss, train_lambdamart, train_lambdamart_relevance, train_pointwise, GroupLambdas,
    RankingProblem, RoundTrace,
};
pub use tree::{fit_tree, fit_tree_weighted, Presorted, Tree, TreeNode, TreeParams, LEAF_L2};

/// Scale of the pairwise logistic in lambda gradients.
pub const SIGMOID_SCALE: f64 = 1.0;

const FORMAT_NAME: &str = "cfc-ensemble";
const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbdtError {
    #[error("no training rows")]
    EmptyInput,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("dimension mismatch: model expects {expected} inputs, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no query/pass group has both clicked and unclicked documents")]
    NoDiscordantPairs,
    #[error("training inputs do not cover the dataset: {0}")]
    Coverage(String),
    #[error("model document: {0}")]
    Format(String),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_cols: usize) -> Self {
        FeatureMatrix {
            n_cols,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GbdtError> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut m = FeatureMatrix::new(n_cols);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), GbdtError> {
        if row.len() != self.n_cols {
            return Err(GbdtError::DimensionMismatch {
                expected: self.n_cols,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.data.len().checked_div(self.n_cols).unwrap_or(0)
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_data_in_leaf: usize,
    /// Truncation of the NDCG used to weight lambda gradients.
    pub ndcg_cutoff: usize,
    /// Recorded with the model. Training itself draws no random numbers.
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            n_trees: 100,
            learning_rate: 0.1,
            max_leaves: 255,
            min_data_in_leaf: 2,
            ndcg_cutoff: 10,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), GbdtError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GbdtError::InvalidParams(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_leaves < 1 || self.min_data_in_leaf < 1 || self.ndcg_cutoff < 1 {
            return Err(GbdtError::InvalidParams(
                "max_leaves, min_data_in_leaf and ndcg_cutoff must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_leaves: self.max_leaves,
            min_data_in_leaf: self.min_data_in_leaf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    LambdaRank,
    SquaredError,
}

impl Objective {
    fn name(self) -> &'static str {
        match self {
            Objective::LambdaRank => "lambdarank",
            Objective::SquaredError => "squared_error",
        }
    }
}

/// Boosted ensemble scoring `base_score + learning_rate · Σ tree(row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerEnsemble {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub base_score: f64,
    pub input_dim: usize,
    pub objective: Objective,
    pub params: TrainParams,
}

impl RankerEnsemble {
    /// Score a full input row (features plus control slot for rankers).
    pub fn predict_row(&self, row: &[f64]) -> Result<f64, GbdtError> {
        if row.len() != self.input_dim {
            return Err(GbdtError::DimensionMismatch {
                expected: self.input_dim,
                found: row.len(),
            });
        }
        Ok(self.score_unchecked(row))
    }

    pub(crate) fn score_unchecked(&self, row: &[f64]) -> f64 {
        let mut s = self.base_score;
        for t in &self.trees {
            s += self.learning_rate * t.predict(row);
        }
        s
    }

    /// Score a document with the control slot set to `control`. Pass `0.0`
    /// for inference.
    pub fn predict(&self, features: &[f64], control: f64) -> Result<f64, GbdtError> {
        if features.len() + 1 != self.input_dim {
            return Err(GbdtError::DimensionMismatch {
                expected: self.input_dim,
                found: features.len() + 1,
            });
        }
        let mut row = Vec::with_capacity(self.input_dim);
        row.extend_from_slice(features);
        row.push(control);
        Ok(self.score_unchecked(&row))
    }

    /// The first `n` trees as a standalone model.
    pub fn truncated(&self, n: usize) -> RankerEnsemble {
        let mut m = self.clone();
        m.trees.truncate(n);
        m.params.n_trees = m.trees.len();
        m
    }

    /// Versioned JSON text. Floats carry 17 significant digits, one node per
    /// line, so two models can be compared with a plain text diff.
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let _ = writeln!(out, "{{");
        let _ = writeln!(out, "  \"format\": \"{FORMAT_NAME}\",");
        let _ = writeln!(out, "  \"version\": {FORMAT_VERSION},");
        let _ = writeln!(out, "  \"objective\": \"{}\",", self.objective.name());
        let _ = writeln!(out, "  \"input_dim\": {},", self.input_dim);
        let _ = writeln!(out, "  \"base_score\": {},", fmt_f64(self.base_score));
        let _ = writeln!(out, "  \"learning_rate\": {},", fmt_f64(self.learning_rate));
        let _ = writeln!(
            out,
            "  \"params\": {{\"n_trees\": {}, \"learning_rate\": {}, \"max_leaves\": {}, \"min_data_in_leaf\": {}, \"ndcg_cutoff\": {}, \"leaf_l2\": {}, \"sigmoid\": {}, \"seed\": {}}},",
            p.n_trees,
            fmt_f64(p.learning_rate),
            p.max_leaves,
            p.min_data_in_leaf,
            p.ndcg_cutoff,
            fmt_f64(LEAF_L2),
            fmt_f64(SIGMOID_SCALE),
            p.seed
        );
        let _ = writeln!(out, "  \"trees\": [");
        for (ti, t) in self.trees.iter().enumerate() {
            let _ = writeln!(out, "    [");
            for (ni, node) in t.nodes.iter().enumerate() {
                let sep = if ni + 1 < t.nodes.len() { "," } else { "" };
                match *node {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let _ = writeln!(
                            out,
                            "      {{\"feature\": {feature}, \"threshold\": {}, \"left\": {left}, \"right\": {right}}}{sep}",
                            fmt_f64(threshold)
                        );
                    }
                    TreeNode::Leaf { value } => {
                        let _ = writeln!(out, "      {{\"leaf\": {}}}{sep}", fmt_f64(value));
                    }
                }
            }
            let sep = if ti + 1 < self.trees.len() { "," } else { "" };
            let _ = writeln!(out, "    ]{sep}");
        }
        let _ = writeln!(out, "  ]");
        let _ = writeln!(out, "}}");
        out
    }

    pub fn from_json(text: &str) -> Result<Self, GbdtError> {
        use serde_json::Value;
        let bad = |m: &str| GbdtError::Format(m.to_string());
        let v: Value = serde_json::from_str(text).map_err(|e| GbdtError::Format(e.to_string()))?;
        if v["format"] != FORMAT_NAME {
            return Err(bad("not a cfc ensemble"));
        }
        if v["version"].as_u64() != Some(FORMAT_VERSION) {
            return Err(bad("unsupported version"));
        }
        let num = |x: &Value, name: &str| x.as_f64().ok_or_else(|| bad(name));
        let int = |x: &Value, name: &str| x.as_u64().map(|u| u as usize).ok_or_else(|| bad(name));
        let objective = match v["objective"].as_str() {
            Some("lambdarank") => Objective::LambdaRank,
            Some("squared_error") => Objective::SquaredError,
            _ => return Err(bad("unknown objective")),
        };
        let p = &v["params"];
        let params = TrainParams {
            n_trees: int(&p["n_trees"], "params.n_trees")?,
            learning_rate: num(&p["learning_rate"], "params.learning_rate")?,
            max_leaves: int(&p["max_leaves"], "params.max_leaves")?,
            min_data_in_leaf: int(&p["min_data_in_leaf"], "params.min_data_in_leaf")?,
            ndcg_cutoff: int(&p["ndcg_cutoff"], "params.ndcg_cutoff")?,
            seed: p["seed"].as_u64().ok_or_else(|| bad("params.seed"))?,
        };
        let input_dim = int(&v["input_dim"], "input_dim")?;
        let mut trees = Vec::new();
        for t in v["trees"].as_array().ok_or_else(|| bad("trees"))? {
            let mut nodes = Vec::new();
            let arr = t.as_array().ok_or_else(|| bad("tree"))?;
            for n in arr {
                let node = if let Some(leaf) = n.get("leaf") {
                    TreeNode::Leaf {
                        value: num(leaf, "leaf")?,
                    }
                } else {
                    let feature = int(&n["feature"], "feature")?;
                    let left = int(&n["left"], "left")?;
                    let right = int(&n["right"], "right")?;
                    if feature >= input_dim || left >= arr.len() || right >= arr.len() {
                        return Err(bad("node index out of range"));
                    }
                    TreeNode::Split {
                        feature,
                        threshold: num(&n["threshold"], "threshold")?,
                        left,
                        right,
                    }
                };
                nodes.push(node);
            }
            if nodes.is_empty() {
                return Err(bad("empty tree"));
            }
            trees.push(Tree { nodes });
        }
        Ok(RankerEnsemble {
            trees,
            learning_rate: num(&v["learning_rate"], "learning_rate")?,
            base_score: num(&v["base_score"], "base_score")?,
            input_dim,
            objective,
            params,
        })
    }
}

fn fmt_f64(v: f64) -> String {
    assert!(v.is_finite(), "model parameters must be finite");
    format!("{v:.16e}")
}
