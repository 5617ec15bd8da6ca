use cfc::clicks::{rank_with, simulate_clicks, LinearRanker, SimConfig};
use cfc::control::{fit_ridge, residuals, RidgeModel};
use cfc::data::{synth_dataset, Dataset, DocId, Document, Query};
use cfc::gbdt::{group_lambdas, train_lambdamart, FeatureMatrix, TrainParams};
use cfc::metrics::{err_at, ndcg_at, relevance_gain, score_dataset};
use cfc::stats::{fligner_killeen, normal_cdf};
use cfc::transforms::{fit_transform, ControlSignals, Kde, TransformKind};
use proptest::prelude::*;

fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
    FeatureMatrix::from_rows(rows).unwrap()
}

fn norm(m: &RidgeModel) -> f64 {
    m.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
}

/// Rows of `dim` features followed by a target, with more rows than columns.
fn regression_data() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..5).prop_flat_map(|dim| {
        prop::collection::vec((prop::collection::vec(-3.0f64..3.0, dim), -5.0f64..5.0), dim + 3..30)
            .prop_map(|rows| rows.into_iter().unzip())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ols_residuals_are_orthogonal_to_centred_features((rows, y) in regression_data()) {
        let Ok(model) = fit_ridge(&matrix(&rows), &y, 0.0) else {
            // Collinear draws have no unique least-squares solution.
            return Ok(());
        };
        let n = rows.len() as f64;
        let dim = rows[0].len();
        let res: Vec<f64> = rows.iter().zip(&y).map(|(r, t)| t - model.predict(r)).collect();
        prop_assert!(res.iter().sum::<f64>().abs() < 1e-8);
        for j in 0..dim {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let dot: f64 = rows.iter().zip(&res).map(|(r, e)| (r[j] - mean) * e).sum();
            prop_assert!(dot.abs() < 1e-8, "coordinate {j}: {dot}");
        }
    }

    #[test]
    fn ridge_weights_shrink_with_the_penalty((rows, y) in regression_data(), a in 1e-3f64..10.0, b in 1e-3f64..10.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(lo < hi);
        let x = matrix(&rows);
        let small = fit_ridge(&x, &y, lo).unwrap();
        let large = fit_ridge(&x, &y, hi).unwrap();
        prop_assert!(norm(&small) >= norm(&large) - 1e-12, "{} < {}", norm(&small), norm(&large));
    }

    #[test]
    fn minmax_is_bounded_and_order_preserving(
        sample in prop::collection::vec(-100.0f64..100.0, 2..50),
        mut probes in prop::collection::vec(-300.0f64..300.0, 2..20),
    ) {
        let t = fit_transform(TransformKind::MinMax, &sample).unwrap();
        probes.sort_by(f64::total_cmp);
        let out: Vec<f64> = probes.iter().map(|&v| t.transform(v).unwrap()).collect();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn transforms_are_pure(sample in prop::collection::vec(-10.0f64..10.0, 3..40), probe in -20.0f64..20.0) {
        prop_assume!(sample.iter().any(|v| *v != sample[0]));
        for kind in TransformKind::ALL {
            let a = fit_transform(kind, &sample).unwrap();
            let b = fit_transform(kind, &sample).unwrap();
            prop_assert_eq!(a.transform(probe).unwrap().to_bits(), b.transform(probe).unwrap().to_bits());
            prop_assert_eq!(a.transform(probe).unwrap().to_bits(), a.transform(probe).unwrap().to_bits());
        }
    }

    #[test]
    fn kde_integrates_to_one_and_cdf_is_monotone(sample in prop::collection::vec(-5.0f64..5.0, 2..60), h in 0.05f64..2.0) {
        let kde = Kde::exact(&sample, h);
        let lo = sample.iter().copied().fold(f64::INFINITY, f64::min) - 6.0 * h;
        let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 6.0 * h;
        let steps = 4000;
        let dx = (hi - lo) / steps as f64;
        let mut area = 0.0;
        let mut prev_cdf = kde.cdf(lo);
        for i in 0..steps {
            let x = lo + i as f64 * dx;
            area += 0.5 * (kde.pdf(x) + kde.pdf(x + dx)) * dx;
            let c = kde.cdf(x + dx);
            prop_assert!(c >= prev_cdf);
            prev_cdf = c;
        }
        prop_assert!((area - 1.0).abs() < 1e-3, "area {area}");
        prop_assert!(kde.cdf(lo - 40.0 * h) < 1e-12);
        prop_assert!(kde.cdf(hi + 40.0 * h) > 1.0 - 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval(rels in prop::collection::vec(0u8..=4, 1..30), p in 1usize..35) {
        let gains: Vec<f64> = rels.iter().map(|&r| relevance_gain(r)).collect();
        if let Some(v) = ndcg_at(&gains, p).unwrap() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "ndcg {v}");
        }
        let e = err_at(&rels, p, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&e), "err {e}");
    }

    #[test]
    fn promoting_the_better_document_never_lowers_ndcg(
        rels in prop::collection::vec(0u8..=4, 2..15),
        i in 0usize..15,
        j in 0usize..15,
        p in 1usize..16,
    ) {
        let n = rels.len();
        let (i, j) = (i % n, j % n);
        prop_assume!(i < j && j < p);
        let gains: Vec<f64> = rels.iter().map(|&r| relevance_gain(r)).collect();
        let Some(before) = ndcg_at(&gains, p).unwrap() else { return Ok(()) };
        let mut swapped = gains.clone();
        // Move the higher-graded of the two to the better position i.
        if swapped[j] > swapped[i] {
            swapped.swap(i, j);
        }
        let after = ndcg_at(&swapped, p).unwrap().unwrap();
        prop_assert!(after >= before - 1e-15);
    }

    #[test]
    fn lambdas_are_antisymmetric(
        list in prop::collection::vec((-3.0f64..3.0, 0u8..=4), 2..12),
        cutoff in 1usize..12,
    ) {
        let (scores, labels): (Vec<f64>, Vec<u8>) = list.into_iter().unzip();
        let g = group_lambdas(&scores, &labels, cutoff);
        for &(i, j, lij, lji, _) in &g.pairs {
            prop_assert!(labels[i] > labels[j]);
            prop_assert_eq!(lij, -lji);
        }
        let total: f64 = g.grads.iter().sum();
        prop_assert!(total.abs() < 1e-12, "gradients sum to {total}");
    }

    #[test]
    fn fligner_ignores_group_shift_and_relabelling(
        a in prop::collection::vec(-64i32..64, 3..12),
        b in prop::collection::vec(-64i32..64, 3..12),
        shift in -100i32..100,
    ) {
        // Multiples of 1/8 keep every shifted deviation exact.
        let a: Vec<f64> = a.into_iter().map(|v| f64::from(v) / 8.0).collect();
        let b: Vec<f64> = b.into_iter().map(|v| f64::from(v) / 8.0).collect();
        let Ok(base) = fligner_killeen(&[a.clone(), b.clone()]) else { return Ok(()) };
        let shifted: Vec<f64> = a.iter().map(|v| v + f64::from(shift)).collect();
        let mut relabelled = b.clone();
        relabelled.reverse();
        let moved = fligner_killeen(&[shifted, relabelled]).unwrap();
        prop_assert!((base.statistic - moved.statistic).abs() < 1e-9);
        let swapped = fligner_killeen(&[b, a]).unwrap();
        prop_assert!((base.statistic - swapped.statistic).abs() < 1e-9);
    }
}

#[test]
fn normal_hazard_decreases_on_a_grid() {
    let t = fit_transform(TransformKind::NormalHazard, &[-1.0, 1.0]).unwrap();
    let values: Vec<f64> = (-300..=300).map(|i| t.transform(i as f64 * 0.02).unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn normal_cdf_is_monotone() {
    let values: Vec<f64> = (-800..=800).map(|i| normal_cdf(i as f64 * 0.01)).collect();
    assert!(values.windows(2).all(|w| w[1] >= w[0]));
}

fn small_problem(seed: u64) -> (Dataset, cfc::clicks::ClickLog, cfc::clicks::RankedLists) {
    let data = synth_dataset(20, 8, 4, seed).unwrap();
    let ranker = LinearRanker {
        weights: vec![1.0, 0.5, -0.25, 0.75],
        bias: 0.0,
    };
    let lists = rank_with(&ranker, &data).unwrap();
    let sim = SimConfig {
        seed,
        ..SimConfig::default()
    };
    let clicks = simulate_clicks(&lists, &data, &sim).unwrap();
    (data, clicks, lists)
}

#[test]
fn residuals_biject_with_ranked_documents() {
    let (data, _, lists) = small_problem(3);
    let rows: Vec<Vec<f64>> = data.documents().map(|d| d.features.clone()).collect();
    let targets: Vec<f64> = lists
        .lists
        .iter()
        .flat_map(|l| l.positions.iter().map(|&p| f64::from(p)))
        .collect();
    let model = fit_ridge(&matrix(&rows), &targets, 1.0).unwrap();
    let res = residuals(&cfc::FirstStageModel::Ridge(model), &data, &lists).unwrap();
    assert_eq!(res.queries.len(), lists.lists.len());
    for (r, l) in res.queries.iter().zip(&lists.lists) {
        assert_eq!(r.query_id, l.query_id);
        assert_eq!(r.residuals.len(), l.positions.len());
        assert_eq!(r.positions, l.positions);
    }
    assert_eq!(res.len(), data.n_documents());
}

#[test]
fn scores_do_not_depend_on_document_order() {
    let (data, clicks, _) = small_problem(5);
    let params = TrainParams {
        n_trees: 15,
        ..TrainParams::default()
    };
    let model = train_lambdamart(&data, &clicks, &ControlSignals::zeros(&data), &params).unwrap();
    let reversed = Dataset::new(
        data.queries()
            .iter()
            .map(|q| Query {
                query_id: q.query_id.clone(),
                documents: q.documents.iter().rev().cloned().collect(),
            })
            .collect(),
        data.feature_dim(),
        data.rel_max(),
    )
    .unwrap();
    let a = score_dataset(&model, &data).unwrap();
    let b = score_dataset(&model, &reversed).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let mut y = y.clone();
        y.reverse();
        assert_eq!(x, &y);
    }
}

#[test]
fn click_rates_fall_with_position_for_equal_relevance() {
    // One query of ten equally relevant documents, presented in index order.
    let docs: Vec<Document> = (0..10)
        .map(|i| Document {
            doc_id: DocId::new(i.to_string()),
            features: vec![-(i as f64)],
            relevance: 3,
        })
        .collect();
    let data = Dataset::new(
        vec![Query {
            query_id: "q".into(),
            documents: docs,
        }],
        1,
        4,
    )
    .unwrap();
    let lists = rank_with(
        &LinearRanker {
            weights: vec![1.0],
            bias: 0.0,
        },
        &data,
    )
    .unwrap();
    let sim = SimConfig {
        passes: 20_000,
        seed: 11,
        ..SimConfig::default()
    };
    let rates = simulate_clicks(&lists, &data, &sim).unwrap().click_rates();
    assert!(rates[0].windows(2).all(|w| w[1] <= w[0]), "{:?}", rates[0]);
}
