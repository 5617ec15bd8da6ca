use super::tree::{fit_tree_weighted, Presorted};
use super::{FeatureMatrix, GbdtError, Objective, RankerEnsemble, TrainParams, SIGMOID_SCALE};
use crate::clicks::ClickLog;
use crate::data::Dataset;
use crate::transforms::ControlSignals;

/// One labelled list over the documents of a query block: a simulated pass
/// for click training, or the graded judgements for the oracle.
#[derive(Debug, Clone)]
struct Group {
    block: usize,
    inv_idcg: f64,
    /// `(i, j, gain_i - gain_j)` for every pair with `label_i > label_j`,
    /// indices local to the block.
    pairs: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    len: usize,
}

/// Per-round diagnostics of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTrace {
    /// Mean of `log(1 + exp(−σ(s_i − s_j)))` over all label-discordant pairs,
    /// measured before the round's tree is added.
    pub pairwise_loss: f64,
}

/// A LambdaMART training set: one matrix row per document (features plus
/// control slot) and any number of labelled groups per query.
///
/// A document appearing in `w` groups stands for `w` training rows; its
/// per-group gradients are summed before tree fitting, which yields the same
/// trees as fitting the expanded rows.
#[derive(Debug, Clone)]
pub struct RankingProblem {
    matrix: FeatureMatrix,
    presorted: Presorted,
    row_weights: Vec<f64>,
    blocks: Vec<Block>,
    groups: Vec<Group>,
    cutoff: usize,
}

fn discount(rank: usize, cutoff: usize) -> f64 {
    if rank < cutoff {
        1.0 / ((rank + 2) as f64).log2()
    } else {
        0.0
    }
}

fn gain(label: u8) -> f64 {
    2f64.powi(i32::from(label)) - 1.0
}

fn make_group(block: usize, labels: &[u8], cutoff: usize) -> Option<Group> {
    let mut ideal: Vec<f64> = labels.iter().map(|&l| gain(l)).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().enumerate().map(|(r, g)| g * discount(r, cutoff)).sum();
    let mut pairs = Vec::new();
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li > lj {
                pairs.push((i as u32, j as u32, gain(li) - gain(lj)));
            }
        }
    }
    (!pairs.is_empty() && idcg > 0.0).then(|| Group {
        block,
        inv_idcg: 1.0 / idcg,
        pairs,
    })
}

/// Ranks (0-based) of a block's documents by descending score, ties by index.
fn ranks_by_score(scores: &[f64], ranks: &mut Vec<usize>, order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..scores.len());
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranks.clear();
    ranks.resize(scores.len(), 0);
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
}

/// Lambda gradients of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLambdas {
    pub grads: Vec<f64>,
    pub hess: Vec<f64>,
    /// `(i, j, λ_ij, λ_ji, |ΔNDCG_ij|)` for each pair with `label_i > label_j`.
    pub pairs: Vec<(usize, usize, f64, f64, f64)>,
}

/// Lambda gradients and hessians of a single list, computed exactly as in
/// training: `λ_ij = −σ/(1 + exp(σ(s_i − s_j)))·|ΔNDCG_ij|` for
/// `label_i > label_j`, added to `i` and subtracted from `j`; hessians
/// `σ²·ρ(1 − ρ)·|ΔNDCG_ij|` with `ρ = 1/(1 + exp(σ(s_i − s_j)))`.
pub fn group_lambdas(scores: &[f64], labels: &[u8], cutoff: usize) -> GroupLambdas {
    let n = scores.len();
    let mut out = GroupLambdas {
        grads: vec![0.0; n],
        hess: vec![0.0; n],
        pairs: Vec::new(),
    };
    let Some(group) = make_group(0, labels, cutoff) else {
        return out;
    };
    let (mut ranks, mut order) = (Vec::new(), Vec::new());
    ranks_by_score(scores, &mut ranks, &mut order);
    for &(i, j, dg) in &group.pairs {
        let (i, j) = (i as usize, j as usize);
        let delta = dg * (discount(ranks[i], cutoff) - discount(ranks[j], cutoff)).abs() * group.inv_idcg;
        let (l, h) = pair_lambda(scores[i], scores[j], delta);
        out.grads[i] += l;
        out.grads[j] -= l;
        out.hess[i] += h;
        out.hess[j] += h;
        out.pairs.push((i, j, l, -l, delta));
    }
    out
}

#[inline]
fn pair_lambda(si: f64, sj: f64, delta: f64) -> (f64, f64) {
    let rho = 1.0 / (1.0 + (SIGMOID_SCALE * (si - sj)).exp());
    (
        -SIGMOID_SCALE * rho * delta,
        SIGMOID_SCALE * SIGMOID_SCALE * rho * (1.0 - rho) * delta,
    )
}

/// `log(1 + exp(−x))` without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Mean pairwise logistic loss of `scores` over label-discordant pairs.
pub fn pairwise_logistic_loss(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li > lj {
                total += softplus_neg(SIGMOID_SCALE * (scores[i] - scores[j]));
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

impl RankingProblem {
    fn build(
        matrix: FeatureMatrix,
        row_weights: Vec<f64>,
        blocks: Vec<Block>,
        label_sets: Vec<(usize, Vec<u8>)>,
        cutoff: usize,
    ) -> Result<Self, GbdtError> {
        if cutoff == 0 {
            return Err(GbdtError::InvalidParams("ndcg_cutoff must be >= 1".into()));
        }
        let groups: Vec<Group> = label_sets
            .into_iter()
            .filter_map(|(b, labels)| make_group(b, &labels, cutoff))
            .collect();
        if groups.is_empty() {
            return Err(GbdtError::NoDiscordantPairs);
        }
        let presorted = Presorted::new(&matrix);
        Ok(RankingProblem {
            matrix,
            presorted,
            row_weights,
            blocks,
            groups,
            cutoff,
        })
    }

    /// Training set from per-pass clicks: each (query, pass) is one group
    /// with binary labels, and each document row is features ⊕ control.
    pub fn from_clicks(
        data: &Dataset,
        clicks: &ClickLog,
        signals: &ControlSignals,
        cutoff: usize,
    ) -> Result<Self, GbdtError> {
        clicks.check(data).map_err(|e| GbdtError::Coverage(e.to_string()))?;
        signals.check(data).map_err(|e| GbdtError::Coverage(e.to_string()))?;
        let mut matrix = FeatureMatrix::new(data.feature_dim() + 1);
        let mut blocks = Vec::with_capacity(data.n_queries());
        let mut label_sets = Vec::new();
        let mut row = Vec::with_capacity(data.feature_dim() + 1);
        for (qi, q) in data.queries().iter().enumerate() {
            let start = matrix.n_rows();
            for (di, d) in q.documents.iter().enumerate() {
                row.clear();
                row.extend_from_slice(&d.features);
                row.push(signals.queries[qi].values[di]);
                matrix.push_row(&row)?;
            }
            blocks.push(Block { start, len: q.len() });
            let qc = &clicks.queries[qi];
            for pass in 0..clicks.passes {
                let labels: Vec<u8> = qc.clicks.iter().map(|c| u8::from(c[pass])).collect();
                label_sets.push((qi, labels));
            }
        }
        let row_weights = vec![clicks.passes as f64; matrix.n_rows()];
        Self::build(matrix, row_weights, blocks, label_sets, cutoff)
    }

    /// Training set on true graded relevance, one group per query, with the
    /// control slot fixed at 0.
    pub fn from_relevance(data: &Dataset, cutoff: usize) -> Result<Self, GbdtError> {
        let mut matrix = FeatureMatrix::new(data.feature_dim() + 1);
        let mut blocks = Vec::with_capacity(data.n_queries());
        let mut label_sets = Vec::new();
        let mut row = Vec::with_capacity(data.feature_dim() + 1);
        for (qi, q) in data.queries().iter().enumerate() {
            let start = matrix.n_rows();
            for d in &q.documents {
                row.clear();
                row.extend_from_slice(&d.features);
                row.push(0.0);
                matrix.push_row(&row)?;
            }
            blocks.push(Block { start, len: q.len() });
            label_sets.push((qi, q.documents.iter().map(|d| d.relevance).collect()));
        }
        let row_weights = vec![1.0; matrix.n_rows()];
        Self::build(matrix, row_weights, blocks, label_sets, cutoff)
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    fn accumulate_lambdas(&self, scores: &[f64], grads: &mut [f64], hess: &mut [f64], disc: &mut [f64]) {
        grads.fill(0.0);
        hess.fill(0.0);
        // Discount of each row's current rank within its block.
        let (mut ranks, mut order) = (Vec::new(), Vec::new());
        for b in &self.blocks {
            ranks_by_score(&scores[b.start..b.start + b.len], &mut ranks, &mut order);
            for (i, &r) in ranks.iter().enumerate() {
                disc[b.start + i] = discount(r, self.cutoff);
            }
        }
        for g in &self.groups {
            let b = self.blocks[g.block];
            for &(i, j, dg) in &g.pairs {
                let (ri, rj) = (b.start + i as usize, b.start + j as usize);
                let dd = (disc[ri] - disc[rj]).abs();
                if dd == 0.0 {
                    continue;
                }
                let delta = dg * dd * g.inv_idcg;
                let (l, h) = pair_lambda(scores[ri], scores[rj], delta);
                grads[ri] += l;
                grads[rj] -= l;
                hess[ri] += h;
                hess[rj] += h;
            }
        }
    }

    fn mean_pair_loss(&self, scores: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for g in &self.groups {
            let b = self.blocks[g.block];
            for &(i, j, _) in &g.pairs {
                let d = scores[b.start + i as usize] - scores[b.start + j as usize];
                total += softplus_neg(SIGMOID_SCALE * d);
                count += 1;
            }
        }
        total / count as f64
    }

    pub fn train(&self, params: &TrainParams) -> Result<RankerEnsemble, GbdtError> {
        self.run(params, None)
    }

    pub fn train_traced(&self, params: &TrainParams) -> Result<(RankerEnsemble, Vec<RoundTrace>), GbdtError> {
        let mut trace = Vec::with_capacity(params.n_trees + 1);
        let model = self.run(params, Some(&mut trace))?;
        Ok((model, trace))
    }

    fn run(&self, params: &TrainParams, mut trace: Option<&mut Vec<RoundTrace>>) -> Result<RankerEnsemble, GbdtError> {
        params.validate()?;
        if params.ndcg_cutoff != self.cutoff {
            return Err(GbdtError::InvalidParams(format!(
                "problem built for NDCG@{}, params ask for NDCG@{}",
                self.cutoff, params.ndcg_cutoff
            )));
        }
        let n = self.matrix.n_rows();
        let mut scores = vec![0.0; n];
        let mut grads = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut disc = vec![0.0; n];
        let mut trees = Vec::with_capacity(params.n_trees);
        let tree_params = params.tree_params();
        for _ in 0..params.n_trees {
            if let Some(t) = trace.as_deref_mut() {
                t.push(RoundTrace {
                    pairwise_loss: self.mean_pair_loss(&scores),
                });
            }
            self.accumulate_lambdas(&scores, &mut grads, &mut hess, &mut disc);
            let tree = fit_tree_weighted(
                &self.matrix,
                &self.presorted,
                &grads,
                &hess,
                &self.row_weights,
                &tree_params,
            )?;
            for (r, s) in scores.iter_mut().enumerate() {
                *s += params.learning_rate * tree.predict(self.matrix.row(r));
            }
            trees.push(tree);
        }
        if let Some(t) = trace {
            t.push(RoundTrace {
                pairwise_loss: self.mean_pair_loss(&scores),
            });
        }
        Ok(RankerEnsemble {
            trees,
            learning_rate: params.learning_rate,
            base_score: 0.0,
            input_dim: self.matrix.n_cols(),
            objective: Objective::LambdaRank,
            params: *params,
        })
    }
}

/// Train the second-stage ranker on per-pass clicks with `signals` in the
/// control slot.
pub fn train_lambdamart(
    data: &Dataset,
    clicks: &ClickLog,
    signals: &ControlSignals,
    params: &TrainParams,
) -> Result<RankerEnsemble, GbdtError> {
    RankingProblem::from_clicks(data, clicks, signals, params.ndcg_cutoff)?.train(params)
}

/// Train on true relevance labels (the oracle ranker).
pub fn train_lambdamart_relevance(data: &Dataset, params: &TrainParams) -> Result<RankerEnsemble, GbdtError> {
    RankingProblem::from_relevance(data, params.ndcg_cutoff)?.train(params)
}

/// Squared-error boosting: base score is the target mean, gradients are
/// `prediction − target` and hessians 1.
pub fn train_pointwise(
    matrix: &FeatureMatrix,
    targets: &[f64],
    params: &TrainParams,
) -> Result<RankerEnsemble, GbdtError> {
    params.validate()?;
    let n = matrix.n_rows();
    if n == 0 {
        return Err(GbdtError::EmptyInput);
    }
    if targets.len() != n {
        return Err(GbdtError::LengthMismatch(format!(
            "{n} rows, {} targets",
            targets.len()
        )));
    }
    let base = targets.iter().sum::<f64>() / n as f64;
    let presorted = Presorted::new(matrix);
    let weights = vec![1.0; n];
    let hess = vec![1.0; n];
    let mut preds = vec![base; n];
    let mut grads = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let tree_params = params.tree_params();
    for _ in 0..params.n_trees {
        for ((g, p), t) in grads.iter_mut().zip(&preds).zip(targets) {
            *g = p - t;
        }
        let tree = fit_tree_weighted(matrix, &presorted, &grads, &hess, &weights, &tree_params)?;
        for (r, p) in preds.iter_mut().enumerate() {
            *p += params.learning_rate * tree.predict(matrix.row(r));
        }
        trees.push(tree);
    }
    Ok(RankerEnsemble {
        trees,
        learning_rate: params.learning_rate,
        base_score: base,
        input_dim: matrix.n_cols(),
        objective: Objective::SquaredError,
        params: *params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::{ClickLog, QueryClicks};
    use crate::data::{DocId, Document, Query};

    fn ndcg_brute(scores: &[f64], labels: &[u8], k: usize) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let dcg = |ord: &[usize]| -> f64 {
            ord.iter()
                .take(k)
                .enumerate()
                .map(|(r, &i)| (2f64.powi(labels[i] as i32) - 1.0) / ((r + 2) as f64).log2())
                .sum()
        };
        let mut ideal: Vec<usize> = (0..labels.len()).collect();
        ideal.sort_by(|&a, &b| labels[b].cmp(&labels[a]));
        dcg(&order) / dcg(&ideal)
    }

    #[test]
    fn delta_ndcg_matches_brute_force_swap() {
        let labels_sets: [&[u8]; 3] = [&[0, 1, 0, 1, 1], &[3, 0, 2, 1, 0, 4, 2, 1], &[1, 0]];
        for labels in labels_sets {
            let n = labels.len();
            let scores: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 * 0.3).collect();
            for k in [1, 3, 10] {
                let out = group_lambdas(&scores, labels, k);
                for &(i, j, _, _, delta) in &out.pairs {
                    let mut swapped = scores.clone();
                    swapped.swap(i, j);
                    let brute = (ndcg_brute(&scores, labels, k) - ndcg_brute(&swapped, labels, k)).abs();
                    assert!((brute - delta).abs() < 1e-12, "{labels:?} k={k} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn lambdas_are_antisymmetric() {
        let labels = [2u8, 0, 1, 0, 3, 1];
        let scores = [0.4, -0.2, 1.3, 0.0, -0.7, 0.9];
        let out = group_lambdas(&scores, &labels, 10);
        for &(_, _, lij, lji, _) in &out.pairs {
            assert_eq!(lij, -lji);
            assert!(lij <= 0.0);
        }
        assert!(out.grads.iter().sum::<f64>().abs() < 1e-12);
        assert!(out.hess.iter().all(|&h| h >= 0.0));
    }

    fn click_fixture() -> (Dataset, ClickLog) {
        // Click bit equals feature 0 in every pass.
        let mut queries = Vec::new();
        let mut clicks = Vec::new();
        for q in 0..20 {
            let mut docs = Vec::new();
            let mut bits = Vec::new();
            for d in 0..10 {
                let on = (q * 3 + d * 7) % 4 == 0;
                let noise = ((q * 13 + d * 5) % 10) as f64 / 10.0;
                docs.push(Document {
                    doc_id: DocId::new(d.to_string()),
                    features: vec![f64::from(u8::from(on)), noise],
                    relevance: 0,
                });
                bits.push(vec![on; 2]);
            }
            if !bits.iter().any(|b| b[0]) {
                bits[0] = vec![true; 2];
                docs[0].features[0] = 1.0;
            }
            queries.push(Query {
                query_id: q.to_string(),
                documents: docs,
            });
            clicks.push(QueryClicks {
                query_id: q.to_string(),
                positions: (1..=10).collect(),
                clicks: bits,
            });
        }
        (
            Dataset::new(queries, 2, 4).unwrap(),
            ClickLog {
                passes: 2,
                queries: clicks,
            },
        )
    }

    #[test]
    fn separable_clicks_reach_perfect_ndcg() {
        let (data, log) = click_fixture();
        let signals = ControlSignals::zeros(&data);
        let params = TrainParams {
            n_trees: 50,
            ..TrainParams::default()
        };
        let model = train_lambdamart(&data, &log, &signals, &params).unwrap();
        for (q, c) in data.queries().iter().zip(&log.queries) {
            let scores: Vec<f64> = q
                .documents
                .iter()
                .map(|d| model.predict(&d.features, 0.0).unwrap())
                .collect();
            let labels: Vec<u8> = c.clicks.iter().map(|b| u8::from(b[0])).collect();
            assert!((ndcg_brute(&scores, &labels, 10) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_trees_and_determinism() {
        let (data, log) = click_fixture();
        let signals = ControlSignals::zeros(&data);
        let params = TrainParams {
            n_trees: 0,
            ..TrainParams::default()
        };
        let m = train_lambdamart(&data, &log, &signals, &params).unwrap();
        assert_eq!(m.predict(&[1.0, 0.5], 3.0).unwrap(), 0.0);

        let params = TrainParams {
            n_trees: 5,
            ..TrainParams::default()
        };
        let a = train_lambdamart(&data, &log, &signals, &params).unwrap();
        let b = train_lambdamart(&data, &log, &signals, &params).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn training_scores_match_prediction_path() {
        let (data, log) = click_fixture();
        let signals = ControlSignals::zeros(&data);
        let params = TrainParams {
            n_trees: 8,
            ..TrainParams::default()
        };
        let problem = RankingProblem::from_clicks(&data, &log, &signals, 10).unwrap();
        let (model, trace) = problem.train_traced(&params).unwrap();
        assert_eq!(trace.len(), 9);
        // Re-derive the final training loss from predict(): must be identical.
        let scores: Vec<f64> = (0..problem.n_rows())
            .map(|r| model.predict_row(problem.row(r)).unwrap())
            .collect();
        assert_eq!(problem.mean_pair_loss(&scores), trace[8].pairwise_loss);
    }

    #[test]
    fn pairwise_loss_does_not_increase() {
        let (data, log) = click_fixture();
        let signals = ControlSignals::zeros(&data);
        let params = TrainParams {
            n_trees: 30,
            learning_rate: 0.05,
            ..TrainParams::default()
        };
        let problem = RankingProblem::from_clicks(&data, &log, &signals, 10).unwrap();
        let (_, trace) = problem.train_traced(&params).unwrap();
        for w in trace.windows(2) {
            assert!(w[1].pairwise_loss <= w[0].pairwise_loss + 1e-9, "{trace:?}");
        }
    }

    #[test]
    fn no_discordant_pairs_is_an_error() {
        let (data, mut log) = click_fixture();
        for q in &mut log.queries {
            for c in &mut q.clicks {
                c.iter_mut().for_each(|b| *b = false);
            }
        }
        let err = train_lambdamart(&data, &log, &ControlSignals::zeros(&data), &TrainParams::default());
        assert_eq!(err.unwrap_err(), GbdtError::NoDiscordantPairs);
    }

    #[test]
    fn pointwise_constant_target() {
        let m = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let params = TrainParams {
            n_trees: 10,
            ..TrainParams::default()
        };
        let model = train_pointwise(&m, &[4.0, 4.0, 4.0], &params).unwrap();
        assert_eq!(model.base_score, 4.0);
        for x in [0.0, 1.0, 2.0, 9.0] {
            assert_eq!(model.predict_row(&[x]).unwrap(), 4.0);
        }
        assert!(train_pointwise(&FeatureMatrix::new(1), &[], &params).is_err());
    }

    #[test]
    fn pointwise_fits_identity_and_is_monotone() {
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 199.0]).collect();
        let targets: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let m = FeatureMatrix::from_rows(&rows).unwrap();
        let params = TrainParams {
            n_trees: 100,
            ..TrainParams::default()
        };
        let model = train_pointwise(&m, &targets, &params).unwrap();
        let preds: Vec<f64> = rows.iter().map(|r| model.predict_row(r).unwrap()).collect();
        let rmse = (preds.iter().zip(&targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / 200.0).sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
        for w in preds.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }
}
