use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfc::clicks::{rank_with, simulate_clicks, train_initial_ranker, ClickLog, SimConfig};
use cfc::control::{
    fit_first_stage, heteroskedasticity_report, residuals, FirstStageConfig, FirstStageKind, ResidualSet,
};
use cfc::data::{
    apply_normalizer, fit_normalizer, parse_letor, sample_fraction, synth_dataset, write_letor, Dataset, FeatureStats,
};
use cfc::derive_seed;
use cfc::gbdt::{train_lambdamart, train_lambdamart_relevance, RankerEnsemble, TrainParams};
use cfc::metrics::{evaluate, fisher_randomization, MetricConfig, MetricKind, DEFAULT_PERMUTATIONS};
use cfc::pipeline::experiment::{INITIAL_EPOCHS, INITIAL_STEP};
use cfc::pipeline::{
    debias_validation_clicks, run_experiment, tune_and_train, tune_baseline, ExperimentConfig, SplitInputs, TuneGrid,
    TuneInputs, ValidationMode, DEFAULT_DEBIAS_LAMBDA,
};
use cfc::transforms::{apply_all, apply_fitted, ControlSignals, TransformKind};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// Control function correction for position-biased clicks.
#[derive(Debug, Parser)]
#[command(name = "cfc", version, arg_required_else_help = true)]
struct Cli {
    /// Worker threads (0 uses every core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic LETOR dataset.
    Synth(SynthArgs),
    /// Parse a LETOR file, print a summary and optionally normalize it.
    ParseCheck(ParseCheckArgs),
    /// Train the initial ranker on a share of the queries and simulate clicks on the rest.
    Simulate(SimulateArgs),
    /// Fit the first-stage position model and write residuals.
    FirstStage(FirstStageArgs),
    /// Turn residuals into control signals.
    Transform(TransformArgs),
    /// Train a LambdaMART ranker on clicks and control signals.
    Train(TrainArgs),
    /// Evaluate a ranker against graded relevance.
    Evaluate(EvaluateArgs),
    /// Debias validation clicks with the control signal.
    DebiasValid(DebiasArgs),
    /// Select the transform and boosting parameters on validation data and train.
    Tune(TuneArgs),
    /// Run a seeded experiment sweep from a key = value config file.
    Experiment(ExperimentArgs),
    /// Fligner-Killeen test of residual variance across predicted positions.
    HetTest(HetTestArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Training queries.
    #[arg(long, default_value_t = 200)]
    queries: usize,
    /// Validation queries drawn from the same generator, written to --valid-out.
    #[arg(long, default_value_t = 0, requires = "valid_out")]
    valid_queries: usize,
    /// Test queries drawn from the same generator, written to --test-out.
    #[arg(long, default_value_t = 0, requires = "test_out")]
    test_queries: usize,
    #[arg(long, default_value_t = 20)]
    docs_per_query: usize,
    #[arg(long, default_value_t = 10)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output LETOR file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    valid_out: Option<PathBuf>,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParseCheckArgs {
    /// LETOR file to check.
    #[arg(long)]
    data: PathBuf,
    /// Write the min-max statistics fitted on this file.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Normalize with previously written statistics.
    #[arg(long)]
    normalize_with: Option<PathBuf>,
    /// Normalize with statistics fitted on this file itself.
    #[arg(long, conflicts_with = "normalize_with")]
    normalize: bool,
    /// Output for the normalized dataset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Training LETOR file.
    #[arg(long)]
    data: PathBuf,
    /// Share of training queries used to train the initial ranker.
    #[arg(long, default_value_t = 0.01)]
    initial_fraction: f64,
    /// Position bias severity.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Click noise on irrelevant documents.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    passes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Click log of the training queries left after the initial share.
    #[arg(long)]
    out: PathBuf,
    /// LETOR file of the training queries that received clicks.
    #[arg(long)]
    train_out: PathBuf,
    /// Validation LETOR file, ranked by the same initial ranker.
    #[arg(long, requires = "valid_out")]
    valid: Option<PathBuf>,
    #[arg(long, requires = "valid")]
    valid_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FirstStageArgs {
    #[arg(long)]
    data: PathBuf,
    /// Click log whose positions are the first-stage targets.
    #[arg(long)]
    clicks: PathBuf,
    /// First-stage model: ridge or gbdt.
    #[arg(long, default_value = "ridge")]
    kind: FirstStageKind,
    /// Ridge penalty, or auto to select it on held-out queries.
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Residuals of the training data.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires_all = ["valid_clicks", "valid_out"])]
    valid: Option<PathBuf>,
    #[arg(long, requires = "valid")]
    valid_clicks: Option<PathBuf>,
    #[arg(long, requires = "valid")]
    valid_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TransformArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    residuals: PathBuf,
    /// minmax, pdf, imr or kde-hazard.
    #[arg(long)]
    kind: TransformKind,
    #[arg(long)]
    out: PathBuf,
    /// Validation data transformed with the fit of the training residuals.
    #[arg(long, requires_all = ["valid_residuals", "valid_out"])]
    valid: Option<PathBuf>,
    #[arg(long, requires = "valid")]
    valid_residuals: Option<PathBuf>,
    #[arg(long, requires = "valid")]
    valid_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoostArgs {
    #[arg(long, default_value_t = 255)]
    max_leaves: usize,
    #[arg(long, default_value_t = 2)]
    min_data_in_leaf: usize,
    /// Truncation of the NDCG weighting the lambda gradients.
    #[arg(long, default_value_t = 10)]
    cutoff: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Click log (required unless --relevance is set).
    #[arg(long, required_unless_present = "relevance")]
    clicks: Option<PathBuf>,
    /// Control signals; all zero when absent.
    #[arg(long, conflicts_with = "relevance")]
    signals: Option<PathBuf>,
    /// Train on graded relevance instead of clicks.
    #[arg(long)]
    relevance: bool,
    #[arg(long, default_value_t = 500)]
    n_trees: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[command(flatten)]
    boost: BoostArgs,
    /// Model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 15])]
    cutoffs: Vec<usize>,
    /// csv or json.
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    /// Compare per-query NDCG@10 against this model.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DebiasArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    train_signals: PathBuf,
    #[arg(long)]
    train_clicks: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    valid_signals: PathBuf,
    #[arg(long)]
    valid_clicks: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DEBIAS_LAMBDA)]
    lambda: f64,
    /// Proxy relevance TSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    train_clicks: PathBuf,
    #[arg(long)]
    train_residuals: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    valid_clicks: PathBuf,
    #[arg(long)]
    valid_residuals: PathBuf,
    /// auto, none, or a comma list of minmax, pdf, imr and kde-hazard.
    #[arg(long, default_value = "auto")]
    transform: String,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 300, 400, 500])]
    n_trees: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1])]
    learning_rates: Vec<f64>,
    /// true-relevance, debiased-clicks or biased-clicks.
    #[arg(long, default_value = "debiased-clicks")]
    validation: ValidationMode,
    #[arg(long, default_value_t = DEFAULT_DEBIAS_LAMBDA)]
    debias_lambda: f64,
    #[command(flatten)]
    boost: BoostArgs,
    /// Selected model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-configuration validation CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Test LETOR file; prints the selected model's test NDCG@10.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output_dir in the config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HetTestArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    residuals: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult = Result<String, CliError>;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_data(path: &Path) -> Result<Dataset, CliError> {
    parse_letor(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_clicks(path: &Path, data: &Dataset) -> Result<ClickLog, CliError> {
    ClickLog::from_tsv(&read_text(path)?, data).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_residuals(path: &Path, data: &Dataset) -> Result<ResidualSet, CliError> {
    ResidualSet::from_tsv(&read_text(path)?, data).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_signals(path: &Path, data: &Dataset) -> Result<ControlSignals, CliError> {
    ControlSignals::from_tsv(&read_text(path)?, data).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> Result<RankerEnsemble, CliError> {
    RankerEnsemble::from_json(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let total = a.queries + a.valid_queries + a.test_queries;
    let all = synth_dataset(total, a.docs_per_query, a.features, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let (data, rest) = all.split_at(a.queries);
    let (valid, test) = rest.split_at(a.valid_queries);
    if let Some(p) = &a.valid_out {
        write_text(p, &write_letor(&valid))?;
    }
    if let Some(p) = &a.test_out {
        write_text(p, &write_letor(&test))?;
    }
    emit(a.out.as_deref(), &write_letor(&data))?;
    Ok(format!(
        "synth: {} train, {} validation and {} test queries of {} documents, {} features",
        data.n_queries(),
        valid.n_queries(),
        test.n_queries(),
        a.docs_per_query,
        data.feature_dim()
    ))
}

fn parse_check(a: ParseCheckArgs) -> CliResult {
    let data = read_data(&a.data)?;
    if let Some(p) = &a.stats_out {
        write_text(p, &fit_normalizer(&data).map_err(CliError::data)?.to_text())?;
    }
    let stats = match (&a.normalize_with, a.normalize) {
        (Some(p), _) => Some(FeatureStats::from_text(&read_text(p)?).map_err(CliError::data)?),
        (None, true) => Some(fit_normalizer(&data).map_err(CliError::data)?),
        (None, false) => None,
    };
    if let Some(stats) = stats {
        let out = a
            .out
            .as_deref()
            .ok_or_else(|| CliError::Usage("normalizing needs --out".into()))?;
        write_text(
            out,
            &write_letor(&apply_normalizer(&data, &stats).map_err(CliError::data)?),
        )?;
    }
    let hist = data
        .relevance_histogram()
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",");
    Ok(format!(
        "ok: {} queries, {} documents, {} features, rel_max {}, grades [{hist}]",
        data.n_queries(),
        data.n_documents(),
        data.feature_dim(),
        data.rel_max()
    ))
}

fn simulate(a: SimulateArgs) -> CliResult {
    let data = read_data(&a.data)?;
    let sim = |k: u64| SimConfig {
        eta: a.eta,
        eps_noise: a.noise,
        passes: a.passes,
        seed: derive_seed(a.seed, k),
    };
    let (initial, train) = sample_fraction(&data, a.initial_fraction, derive_seed(a.seed, 2))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if train.is_empty() {
        return Err(CliError::Usage("initial fraction leaves no queries for clicks".into()));
    }
    let ranker =
        train_initial_ranker(&initial, INITIAL_EPOCHS, INITIAL_STEP, derive_seed(a.seed, 3)).map_err(CliError::data)?;
    let lists = rank_with(&ranker, &train).map_err(CliError::data)?;
    let clicks = simulate_clicks(&lists, &train, &sim(4)).map_err(CliError::data)?;
    write_text(&a.out, &clicks.to_tsv(&train))?;
    write_text(&a.train_out, &write_letor(&train))?;
    let mut summary = format!(
        "simulate: {} clicks over {} queries x {} passes (initial ranker on {} queries)",
        clicks.total_clicks(),
        train.n_queries(),
        a.passes,
        initial.n_queries()
    );
    if let (Some(v), Some(out)) = (&a.valid, &a.valid_out) {
        let valid = read_data(v)?;
        let lists = rank_with(&ranker, &valid).map_err(CliError::data)?;
        let clicks = simulate_clicks(&lists, &valid, &sim(5)).map_err(CliError::data)?;
        write_text(out, &clicks.to_tsv(&valid))?;
        let _ = write!(summary, "; validation {} clicks", clicks.total_clicks());
    }
    Ok(summary)
}

fn first_stage(a: FirstStageArgs) -> CliResult {
    let lambda = match a.lambda.as_str() {
        "auto" => None,
        v => Some(
            v.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("--lambda: expected auto or a number, got {v:?}")))?,
        ),
    };
    let data = read_data(&a.data)?;
    let lists = read_clicks(&a.clicks, &data)?.ranked_lists();
    let cfg = FirstStageConfig {
        kind: a.kind,
        lambda,
        seed: a.seed,
        ..FirstStageConfig::default()
    };
    let model = fit_first_stage(&data, &lists, &cfg).map_err(CliError::data)?;
    let res = residuals(&model, &data, &lists).map_err(CliError::data)?;
    write_text(&a.out, &res.to_tsv(&data))?;
    if let (Some(v), Some(vc), Some(out)) = (&a.valid, &a.valid_clicks, &a.valid_out) {
        let valid = read_data(v)?;
        let lists = read_clicks(vc, &valid)?.ranked_lists();
        let res = residuals(&model, &valid, &lists).map_err(CliError::data)?;
        write_text(out, &res.to_tsv(&valid))?;
    }
    let detail = match &model {
        cfc::FirstStageModel::Ridge(m) => format!("lambda {}", m.lambda),
        cfc::FirstStageModel::Gbdt(m) => format!("{} trees", m.trees.len()),
    };
    Ok(format!("first-stage: {} ({detail}), {} residuals", a.kind, res.len()))
}

fn transform(a: TransformArgs) -> CliResult {
    let data = read_data(&a.data)?;
    let res = read_residuals(&a.residuals, &data)?;
    let (signals, fitted) = apply_all(a.kind, &res).map_err(CliError::data)?;
    write_text(&a.out, &signals.to_tsv(&data))?;
    let mut floor_hits = signals.floor_hits;
    if let (Some(v), Some(vr), Some(out)) = (&a.valid, &a.valid_residuals, &a.valid_out) {
        let valid = read_data(v)?;
        let vres = read_residuals(vr, &valid)?;
        let vs = apply_fitted(&fitted, &vres).map_err(CliError::data)?;
        floor_hits += vs.floor_hits;
        write_text(out, &vs.to_tsv(&valid))?;
    }
    Ok(format!(
        "transform: {} on {} residuals, {floor_hits} floored denominators",
        a.kind,
        res.len()
    ))
}

fn boost_params(b: &BoostArgs, n_trees: usize, learning_rate: f64) -> TrainParams {
    TrainParams {
        n_trees,
        learning_rate,
        max_leaves: b.max_leaves,
        min_data_in_leaf: b.min_data_in_leaf,
        ndcg_cutoff: b.cutoff,
        seed: b.seed,
    }
}

fn train(a: TrainArgs) -> CliResult {
    let params = boost_params(&a.boost, a.n_trees, a.learning_rate);
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = read_data(&a.data)?;
    let model = if a.relevance {
        train_lambdamart_relevance(&data, &params).map_err(CliError::data)?
    } else {
        let clicks = read_clicks(a.clicks.as_deref().expect("required without --relevance"), &data)?;
        let signals = match &a.signals {
            Some(p) => read_signals(p, &data)?,
            None => ControlSignals::zeros(&data),
        };
        train_lambdamart(&data, &clicks, &signals, &params).map_err(CliError::data)?
    };
    write_text(&a.out, &model.to_json())?;
    Ok(format!(
        "train: {} trees, learning rate {}",
        model.trees.len(),
        model.learning_rate
    ))
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let model = read_model(&a.model)?;
    let data = read_data(&a.data)?;
    let cfg = MetricConfig {
        cutoffs: a.cutoffs.clone(),
        rel_max: data.rel_max(),
    };
    let report = evaluate(&model, &data, &cfg).map_err(CliError::data)?;
    let text = if a.format == "json" {
        report.to_json()
    } else {
        report.to_csv()
    };
    emit(a.out.as_deref(), &text)?;
    let mut summary = String::from("evaluate:");
    for s in &report.series {
        let _ = write!(summary, " {}@{}={:.4}", s.metric, s.cutoff, s.mean);
    }
    let _ = write!(
        summary,
        " ({} queries, {} skipped)",
        report.query_ids.len(),
        report.n_skipped
    );
    if let Some(b) = &a.baseline {
        let base = evaluate(&read_model(b)?, &data, &cfg).map_err(CliError::data)?;
        let (x, y) = match (report.get(MetricKind::Ndcg, 10), base.get(MetricKind::Ndcg, 10)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(CliError::Usage("comparison needs cutoff 10 in --cutoffs".into())),
        };
        let p = fisher_randomization(&x.per_query, &y.per_query, a.permutations, a.seed).map_err(CliError::data)?;
        let _ = write!(summary, "; vs baseline ndcg@10 {:+.4}, p = {p:.4}", x.mean - y.mean);
    }
    Ok(summary)
}

fn debias(a: DebiasArgs) -> CliResult {
    let train = read_data(&a.train)?;
    let valid = read_data(&a.valid)?;
    let ts = read_signals(&a.train_signals, &train)?;
    let tc = read_clicks(&a.train_clicks, &train)?;
    let vs = read_signals(&a.valid_signals, &valid)?;
    let vc = read_clicks(&a.valid_clicks, &valid)?;
    if ts.kind != vs.kind {
        return Err(CliError::Data(
            "training and validation signals come from different transforms".into(),
        ));
    }
    let (model, proxy) =
        debias_validation_clicks((&train, &ts, &tc), (&valid, &vs, &vc), a.lambda).map_err(CliError::data)?;
    write_text(&a.out, &proxy.to_tsv(&valid))?;
    Ok(format!(
        "debias-valid: click = {:.6} + {:.6} * signal{}",
        model.intercept,
        model.slope,
        if model.intercept_only {
            " (constant signal, intercept only)"
        } else {
            ""
        }
    ))
}

fn parse_transforms(choice: &str) -> Result<Option<Vec<TransformKind>>, CliError> {
    match choice {
        "auto" => Ok(Some(TransformKind::ALL.to_vec())),
        "none" => Ok(None),
        list => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<TransformKind>()
                    .map_err(|e| CliError::Usage(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
    }
}

fn tune(a: TuneArgs) -> CliResult {
    let transforms = parse_transforms(&a.transform)?;
    let grid = TuneGrid {
        transforms: transforms.clone().unwrap_or_else(|| TransformKind::ALL.to_vec()),
        n_trees: a.n_trees.clone(),
        learning_rates: a.learning_rates.clone(),
        validation: a.validation,
    };
    grid.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let params = boost_params(&a.boost, 1, 0.1);
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train = read_data(&a.train)?;
    let valid = read_data(&a.valid)?;
    let tc = read_clicks(&a.train_clicks, &train)?;
    let vc = read_clicks(&a.valid_clicks, &valid)?;
    let tr = read_residuals(&a.train_residuals, &train)?;
    let vr = read_residuals(&a.valid_residuals, &valid)?;
    let inputs = TuneInputs {
        train: SplitInputs {
            data: &train,
            clicks: &tc,
            residuals: &tr,
        },
        valid: SplitInputs {
            data: &valid,
            clicks: &vc,
            residuals: &vr,
        },
        params,
        debias_lambda: a.debias_lambda,
    };
    let outcome = match transforms {
        Some(_) => tune_and_train(inputs, &grid),
        None => tune_baseline(inputs, &grid),
    }
    .map_err(CliError::data)?;
    write_text(&a.out, &outcome.best.to_json())?;
    if let Some(p) = &a.report {
        write_text(p, &outcome.report_csv())?;
    }
    let b = &outcome.best_config;
    let mut summary = format!(
        "tune ({}): transform {}, {} trees, learning rate {}, validation ndcg@10 {:.4}",
        outcome.mode,
        b.transform.map_or("none", TransformKind::name),
        b.n_trees,
        b.learning_rate,
        -outcome.validation_loss()
    );
    if let Some(t) = &a.test {
        let test = read_data(t)?;
        let cfg = MetricConfig {
            cutoffs: vec![10],
            rel_max: test.rel_max(),
        };
        let rep = evaluate(&outcome.best, &test, &cfg).map_err(CliError::data)?;
        let _ = write!(
            summary,
            ", test ndcg@10 {:.4}",
            rep.mean(MetricKind::Ndcg, 10).unwrap_or(f64::NAN)
        );
    }
    Ok(summary)
}

fn experiment(a: ExperimentArgs) -> CliResult {
    let text = read_text(&a.config)?;
    let mut cfg =
        ExperimentConfig::from_kv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    if let Some(d) = a.out_dir {
        cfg.output_dir = Some(d);
    }
    let report = run_experiment(&cfg).map_err(CliError::data)?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    write_text(&dir.join("runs.csv"), &report.runs_csv())?;
    write_text(&dir.join("summary.csv"), &report.summary_csv())?;
    write_text(&dir.join("tuning.csv"), &report.tuning_csv())?;
    write_text(&dir.join("heteroskedasticity.csv"), &report.heteroskedasticity_csv())?;
    let mut summary = format!("experiment: {} runs written to {}", report.runs.len(), dir.display());
    for s in report
        .summaries
        .iter()
        .filter(|s| s.method == "cfc" || s.method == "baseline")
    {
        if let Some((_, _, v)) = s.means.iter().find(|(m, c, _)| *m == MetricKind::Ndcg && *c == 10) {
            let label = if s.axis_value.is_empty() {
                String::new()
            } else {
                format!("[{}] ", s.axis_value)
            };
            let _ = write!(summary, "; {label}{} ndcg@10 {v:.4}", s.method);
        }
    }
    Ok(summary)
}

fn het_test(a: HetTestArgs) -> CliResult {
    let data = read_data(&a.data)?;
    let res = read_residuals(&a.residuals, &data)?;
    let t = heteroskedasticity_report(&res, a.bins).map_err(CliError::data)?;
    println!("statistic\tdof\tp_value");
    println!("{}\t{}\t{}", t.statistic, t.dof, t.p_value);
    Ok(format!(
        "het-test: statistic {:.4}, dof {}, p = {:.3e}",
        t.statistic, t.dof, t.p_value
    ))
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => synth(a),
        Command::ParseCheck(a) => parse_check(a),
        Command::Simulate(a) => simulate(a),
        Command::FirstStage(a) => first_stage(a),
        Command::Transform(a) => transform(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::DebiasValid(a) => debias(a),
        Command::Tune(a) => tune(a),
        Command::Experiment(a) => experiment(a),
        Command::HetTest(a) => het_test(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(summary) => {
            eprintln!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
