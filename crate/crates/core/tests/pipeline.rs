use cfc::clicks::{rank_with, simulate_clicks, train_initial_ranker, ClickLog, SimConfig};
use cfc::control::{fit_first_stage, residuals, FirstStageConfig, ResidualSet};
use cfc::data::{sample_fraction, synth_dataset, Dataset};
use cfc::metrics::{score_dataset, MetricConfig};
use cfc::pipeline::experiment::DataSource;
use cfc::pipeline::{
    run_experiment, tune_and_train, tune_baseline, validation_ndcg, ExperimentConfig, SplitInputs, SweepAxis, TuneGrid,
    TuneInputs, ValidationMode,
};
use cfc::transforms::TransformKind;
use cfc::TrainParams;

struct Problem {
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    train_clicks: ClickLog,
    valid_clicks: ClickLog,
    train_res: ResidualSet,
    valid_res: ResidualSet,
}

impl Problem {
    fn new(seed: u64) -> Self {
        let all = synth_dataset(70, 10, 5, seed).unwrap();
        let (pool, rest) = all.split_at(40);
        let (valid, test) = rest.split_at(15);
        let (initial, train) = sample_fraction(&pool, 0.05, seed + 1).unwrap();
        let ranker = train_initial_ranker(&initial, 10, 0.01, seed + 2).unwrap();
        let train_lists = rank_with(&ranker, &train).unwrap();
        let valid_lists = rank_with(&ranker, &valid).unwrap();
        let sim = |s| SimConfig {
            seed: s,
            ..SimConfig::default()
        };
        let train_clicks = simulate_clicks(&train_lists, &train, &sim(seed + 3)).unwrap();
        let valid_clicks = simulate_clicks(&valid_lists, &valid, &sim(seed + 4)).unwrap();
        let first = fit_first_stage(&train, &train_lists, &FirstStageConfig::default()).unwrap();
        let train_res = residuals(&first, &train, &train_lists).unwrap();
        let valid_res = residuals(&first, &valid, &valid_lists).unwrap();
        Problem {
            train,
            valid,
            test,
            train_clicks,
            valid_clicks,
            train_res,
            valid_res,
        }
    }

    fn inputs<'a>(&'a self, train_res: &'a ResidualSet, valid_res: &'a ResidualSet) -> TuneInputs<'a> {
        TuneInputs {
            train: SplitInputs {
                data: &self.train,
                clicks: &self.train_clicks,
                residuals: train_res,
            },
            valid: SplitInputs {
                data: &self.valid,
                clicks: &self.valid_clicks,
                residuals: valid_res,
            },
            params: TrainParams::default(),
            debias_lambda: 1e-3,
        }
    }
}

fn grid(validation: ValidationMode) -> TuneGrid {
    TuneGrid {
        transforms: TransformKind::ALL.to_vec(),
        n_trees: vec![100, 150],
        learning_rates: vec![0.05, 0.1],
        validation,
    }
}

fn constant(res: &ResidualSet) -> ResidualSet {
    let mut out = res.clone();
    for q in &mut out.queries {
        q.residuals.iter_mut().for_each(|r| *r = 0.25);
    }
    out
}

#[test]
fn zero_control_signal_reproduces_the_baseline() {
    let p = Problem::new(21);
    // Constant residuals make the min-max signal identically zero.
    let (tr, vr) = (constant(&p.train_res), constant(&p.valid_res));
    let inputs = p.inputs(&tr, &vr);
    for mode in [ValidationMode::TrueRelevance, ValidationMode::BiasedClicks] {
        let g = TuneGrid {
            transforms: vec![TransformKind::MinMax],
            ..grid(mode)
        };
        let cfc = tune_and_train(inputs, &g).unwrap();
        let base = tune_baseline(inputs, &g).unwrap();
        assert_eq!(cfc.best.to_json(), base.best.to_json(), "{mode}");
        assert_eq!(
            score_dataset(&cfc.best, &p.test).unwrap(),
            score_dataset(&base.best, &p.test).unwrap()
        );
    }
}

#[test]
fn selected_model_recomputes_to_the_best_reported_loss() {
    let p = Problem::new(8);
    let inputs = p.inputs(&p.train_res, &p.valid_res);
    for mode in ValidationMode::ALL {
        let outcome = tune_and_train(inputs, &grid(mode)).unwrap();
        let best_reported = outcome
            .report
            .iter()
            .filter_map(|r| r.loss())
            .fold(f64::INFINITY, f64::min);
        let recomputed = validation_ndcg(&outcome.best, &inputs, mode, outcome.best_config.transform).unwrap();
        assert!(
            (-recomputed - best_reported).abs() < 1e-12,
            "{mode}: {recomputed} vs {best_reported}"
        );
        assert_eq!(outcome.validation_loss(), best_reported);
        assert_eq!(outcome.report.len(), 4 * 2 * 2);
    }
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        master_seed: 17,
        n_seeds: 2,
        data: DataSource::Synthetic {
            train_queries: 30,
            valid_queries: 10,
            test_queries: 10,
            docs_per_query: 8,
            feature_dim: 4,
        },
        initial_fraction: 0.1,
        grid: TuneGrid {
            transforms: vec![TransformKind::MinMax, TransformKind::KdeHazard],
            n_trees: vec![100],
            learning_rates: vec![0.1],
            validation: ValidationMode::DebiasedClicks,
        },
        metrics: MetricConfig::default(),
        permutations: 200,
        axis: Some(SweepAxis::Passes),
        values: vec!["1".into(), "5".into()],
        ..ExperimentConfig::default()
    }
}

#[test]
fn experiments_are_deterministic() {
    let cfg = tiny_config();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.runs_csv(), b.runs_csv());
    assert_eq!(a.summary_csv(), b.summary_csv());
    assert_eq!(a.tuning_csv(), b.tuning_csv());
    assert_eq!(a.heteroskedasticity_csv(), b.heteroskedasticity_csv());
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.cfc.best.to_json(), y.cfc.best.to_json());
    }
    assert_eq!(a.runs.len(), 4);
    let methods: Vec<&str> = a.runs[0].methods.keys().map(String::as_str).collect();
    assert_eq!(methods, ["baseline", "cfc", "cfc-bc", "cfc-dc", "cfc-tr", "oracle"]);
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = ExperimentConfig {
        axis: None,
        values: Vec::new(),
        n_seeds: 1,
        ..tiny_config()
    };
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(&cfg).unwrap());
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| run_experiment(&cfg).unwrap());
    assert_eq!(one.runs_csv(), many.runs_csv());
    assert_eq!(one.tuning_csv(), many.tuning_csv());
}

#[test]
fn config_files_parse_and_reject_unknown_keys() {
    let cfg = ExperimentConfig::from_kv(
        "seeds = 3\neta = 1.5\nnoise = 0.1\npasses = 20\ntransforms = imr,pdf\nvalidation = biased-clicks\n\
         axis = first-stage-kind\nvalues = ridge,gbdt\nridge_lambda = 0.5\n",
    )
    .unwrap();
    assert_eq!(cfg.n_seeds, 3);
    assert_eq!(cfg.sim.eta, 1.5);
    assert_eq!(cfg.sim.eps_noise, 0.1);
    assert_eq!(cfg.sim.passes, 20);
    assert_eq!(
        cfg.grid.transforms,
        [TransformKind::NormalHazard, TransformKind::NormalPdf]
    );
    assert_eq!(cfg.grid.validation, ValidationMode::BiasedClicks);
    assert_eq!(cfg.first_stage.lambda, Some(0.5));
    assert_eq!(cfg.settings().unwrap().len(), 2);
    assert!(ExperimentConfig::from_kv("colour = blue\n").is_err());
    assert!(ExperimentConfig::from_kv("n_trees = 50\n").is_err());
    assert!(ExperimentConfig::from_kv("learning_rates = 0.3\n").is_err());
    assert!(ExperimentConfig::from_kv("axis = eta\n").is_err());
    assert!(ExperimentConfig::from_kv("axis = eta\nvalues = -1\n").is_err());
}
