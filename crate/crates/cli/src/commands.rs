use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mdcal::calibrate::{
    apply, calibrate_naive, calibrate_robust, fit_platt, worst_env_squared_error, MonotoneMap,
    PlattMap, Recalibrator, RobustOptions,
};
use mdcal::env_data::{
    generate_setting_a, generate_setting_b, load_bundle, save_bundle, two_bit_bundle, DataFormat,
    EnvironmentBundle, GaussianEnvSpecA, GaussianEnvSpecB, TwoBitEnvSpec,
};
use mdcal::landscape::{
    invariant_optimum, irmv1_common_zeros, population_loss, two_bit_population_penalties,
    OddClassifier, DEFAULT_GRID,
};
use mdcal::metrics::{
    metric_report, reliability_bins, EnvPredictions, KernelSpec, MetricReport, PredictionSet,
    DEFAULT_BINS,
};
use mdcal::models::{
    objective, train, BaseLoss, Hyper, LinearClassifier, MlpClassifier, Model, ObjectiveSpec,
    OptimizerKind, Penalty, TwoMomentRegressor,
};
use mdcal::selection::{
    evaluate_ood, select_threshold_avg_ece, select_worst_case_ece, Candidate, CandidatePool,
    OodReport, SelectionReport,
};
use mdcal::theory::{
    verify_theorem1, verify_theorem2, Thm1Mode, Thm1Options, Thm2Options, VerificationReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{report_json, resolve, Resolved};
use crate::{
    Cli, CliError, Command, Format, Method, ModelKind, Optimizer, Pair, PenaltyKind, SelectMode,
    Setting, VerifyMode,
};

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Generate(a) => generate(&cli.out, resolve(cfg, a, cli.seed)?),
        Command::Train(a) => train_cmd(&cli.out, resolve(cfg, a, cli.seed)?),
        Command::Calibrate(a) => calibrate(&cli.out, resolve(cfg, a, cli.seed)?),
        Command::Evaluate(a) => evaluate(&cli.out, resolve(cfg, a, cli.seed)?),
        Command::Select(a) => select(&cli.out, resolve(cfg, a, cli.seed)?),
        Command::Verify(a) => verify(&cli.out, resolve(cfg, a, cli.seed)?),
        Command::Landscape(a) => landscape(&cli.out, resolve(cfg, a, cli.seed)?),
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn write(out: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    let path = out.join(name);
    fs::write(&path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{} ({what}): {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| invalid(e.to_string()))
}

fn required<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| invalid(format!("missing required parameter `{name}`")))
}

fn read_bundle(path: &Path) -> Result<EnvironmentBundle, CliError> {
    let fmt = DataFormat::from_path(path).ok_or_else(|| {
        invalid(format!(
            "{}: unknown data format (use .csv or .json)",
            path.display()
        ))
    })?;
    Ok(load_bundle(path, fmt)?)
}

fn kernel(gamma: f64) -> Result<KernelSpec, CliError> {
    Ok(KernelSpec::rbf(gamma)?)
}

fn two_bit(p: Pair) -> Result<TwoBitEnvSpec, CliError> {
    Ok(TwoBitEnvSpec::new(p.0, p.1)?)
}

/// Per-environment predictions of `model`, optionally recalibrated.
fn predict(
    model: &Model,
    bundle: &EnvironmentBundle,
    cal: Option<&Calibrator>,
) -> Result<PredictionSet, CliError> {
    let envs = bundle
        .environments()
        .iter()
        .map(|e| {
            let raw = model.forward(&e.features)?;
            let f = match cal {
                Some(c) => apply(c, &raw),
                None => raw,
            };
            EnvPredictions::new(e.id.clone(), f, e.labels.clone())
        })
        .collect::<mdcal::Result<Vec<_>>>()?;
    Ok(PredictionSet::new(envs)?)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateConfig {
    setting: Setting,
    alpha: Option<f64>,
    beta: Option<f64>,
    envs: Vec<Pair>,
    n: usize,
    spec: Option<PathBuf>,
    d_ns: usize,
    d_c: usize,
    d_sp: usize,
    k: usize,
    spurious_strength: f64,
    format: Format,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            setting: Setting::TwoBit,
            alpha: None,
            beta: None,
            envs: vec![],
            n: 1000,
            spec: None,
            d_ns: 3,
            d_c: 2,
            d_sp: 2,
            k: 5,
            spurious_strength: 4.0,
            format: Format::Csv,
        }
    }
}

#[derive(Serialize)]
struct GenerateResult {
    data: PathBuf,
    spec: Option<PathBuf>,
    environments: BTreeMap<String, usize>,
    feature_dim: usize,
}

fn generate(out: &Path, run: Resolved<GenerateConfig>) -> Result<String, CliError> {
    let c = &run.config;
    let mut spec_path = None;
    let bundle = match c.setting {
        Setting::TwoBit => {
            let mut envs = c.envs.clone();
            match (c.alpha, c.beta) {
                (Some(a), Some(b)) => envs.insert(0, Pair(a, b)),
                (None, None) => {}
                _ => return Err(invalid("alpha and beta must be given together")),
            }
            if envs.is_empty() {
                return Err(invalid(
                    "two-bit data needs --alpha/--beta or at least one --env",
                ));
            }
            let specs = envs
                .iter()
                .enumerate()
                .map(|(i, &p)| Ok((format!("e{}", i + 1), two_bit(p)?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            two_bit_bundle(&specs, c.n, run.seed)?
        }
        Setting::A => {
            let spec = match &c.spec {
                Some(p) => read_json::<GaussianEnvSpecA>(p, "setting A spec")?,
                None => GaussianEnvSpecA::sample(
                    c.d_ns,
                    c.d_sp,
                    c.k,
                    c.spurious_strength,
                    &mut ChaCha8Rng::seed_from_u64(run.seed),
                ),
            };
            spec_path = Some(write(out, "spec.json", &to_json(&spec)?)?);
            generate_setting_a(&spec, c.n, run.seed)?
        }
        Setting::B => {
            let spec = match &c.spec {
                Some(p) => read_json::<GaussianEnvSpecB>(p, "setting B spec")?,
                None => GaussianEnvSpecB::sample(
                    c.d_c,
                    c.d_sp,
                    c.k,
                    &mut ChaCha8Rng::seed_from_u64(run.seed),
                ),
            };
            spec_path = Some(write(out, "spec.json", &to_json(&spec)?)?);
            generate_setting_b(&spec, c.n, run.seed)?
        }
    };
    let (name, fmt) = match c.format {
        Format::Csv => ("data.csv", DataFormat::Csv),
        Format::Json => ("data.json", DataFormat::Json),
    };
    fs::create_dir_all(out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    let data = out.join(name);
    save_bundle(&bundle, &data, fmt)?;
    let sidecar = serde_json::json!({ "seed": run.seed, "config": &run.config });
    write(out, "generate_config.json", &to_json(&sidecar)?)?;
    let result = GenerateResult {
        data: data.clone(),
        spec: spec_path,
        environments: bundle
            .environments()
            .iter()
            .map(|e| (e.id.clone(), e.len()))
            .collect(),
        feature_dim: bundle.feature_dim(),
    };
    write(
        out,
        "generate_report.json",
        &report_json("generate", &run, &result)?,
    )?;
    Ok(format!(
        "generated {} environments x {} rows, {} features -> {}\n",
        bundle.num_environments(),
        c.n,
        bundle.feature_dim(),
        data.display()
    ))
}

// ---------------------------------------------------------------- train

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainConfig {
    data: Option<PathBuf>,
    model: ModelKind,
    penalty: PenaltyKind,
    /// Required whenever a penalty is used.
    lambda: Option<f64>,
    gamma: f64,
    lr: f64,
    steps: usize,
    batch: usize,
    optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            model: ModelKind::Linear,
            penalty: PenaltyKind::None,
            lambda: None,
            gamma: KernelSpec::default().gamma,
            lr: 0.05,
            steps: 500,
            batch: 512,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Serialize)]
struct TrainResult {
    model: PathBuf,
    trace: PathBuf,
    objective: f64,
    base_loss: f64,
    penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricReport>,
}

fn train_cmd(out: &Path, run: Resolved<TrainConfig>) -> Result<String, CliError> {
    let c = &run.config;
    let bundle = read_bundle(required(&c.data, "data")?)?;
    let d = bundle.feature_dim();
    let init = match c.model {
        ModelKind::Linear => Model::Linear(LinearClassifier::zeros(d)),
        ModelKind::Mlp => Model::Mlp(MlpClassifier::default_for(d, run.seed)?),
        ModelKind::TwoMoment => Model::TwoMoment(TwoMomentRegressor {
            w: vec![0.0; d],
            c: 1.0,
        }),
    };
    let penalty = match c.penalty {
        PenaltyKind::None => Penalty::None,
        PenaltyKind::Clove => Penalty::Clove,
        PenaltyKind::Irmv1 => Penalty::Irmv1,
    };
    let lambda = match (penalty, c.lambda) {
        (Penalty::None, l) => l.unwrap_or(0.0),
        (_, Some(l)) => l,
        (_, None) => return Err(invalid("a penalty needs an explicit `lambda`")),
    };
    let base_loss = if c.model == ModelKind::TwoMoment {
        BaseLoss::Squared
    } else {
        BaseLoss::CrossEntropy
    };
    let spec = ObjectiveSpec {
        base_loss,
        penalty,
        lambda,
        kernel: kernel(c.gamma)?,
    };
    let optimizer = match c.optimizer {
        Optimizer::Sgd => OptimizerKind::Sgd,
        Optimizer::Adagrad => OptimizerKind::Adagrad,
        Optimizer::Adam => OptimizerKind::Adam,
    };
    let hyper = Hyper {
        lr: c.lr,
        steps: c.steps,
        batch_per_env: c.batch,
        seed: run.seed,
        optimizer,
    };
    let trained = train(init, &bundle, &spec, &hyper)?;
    let value = objective(&trained.model, &bundle, &spec)?;
    if !value.total.is_finite() {
        return Err(CliError::Numeric("final objective is not finite".into()));
    }
    let metrics = if trained.model.is_classifier() {
        Some(metric_report(
            &predict(&trained.model, &bundle, None)?,
            DEFAULT_BINS,
            &spec.kernel,
        )?)
    } else {
        None
    };
    let model_path = write(out, "model.json", &to_json(&trained.model)?)?;
    let trace_path = write(out, "trace.csv", &mdcal::models::trace_csv(&trained.trace))?;
    let result = TrainResult {
        model: model_path.clone(),
        trace: trace_path,
        objective: value.total,
        base_loss: value.base,
        penalty: value.penalty,
        metrics,
    };
    write(
        out,
        "train_report.json",
        &report_json("train", &run, &result)?,
    )?;
    Ok(format!(
        "trained {} params for {} steps: objective {:.6} (base {:.6}, penalty {:.6}) -> {}\n",
        trained.model.num_params(),
        c.steps,
        value.total,
        value.base,
        value.penalty,
        model_path.display()
    ))
}

// ---------------------------------------------------------------- calibrate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Calibrator {
    Naive { map: MonotoneMap },
    Robust { map: MonotoneMap },
    Platt { map: PlattMap },
}

impl Recalibrator for Calibrator {
    fn map(&self, f: f64) -> f64 {
        match self {
            Calibrator::Naive { map } | Calibrator::Robust { map } => map.map(f),
            Calibrator::Platt { map } => map.map(f),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CalibrateConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    method: Method,
    max_iter: usize,
    tol: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        let r = RobustOptions::default();
        Self {
            model: None,
            data: None,
            method: Method::Robust,
            max_iter: r.max_iter,
            tol: r.tol,
        }
    }
}

#[derive(Serialize)]
struct CalibrateResult {
    calibrator: PathBuf,
    worst_env_squared_error_before: f64,
    worst_env_squared_error_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lower_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
}

fn calibrate(out: &Path, run: Resolved<CalibrateConfig>) -> Result<String, CliError> {
    let c = &run.config;
    let model: Model = read_json(required(&c.model, "model")?, "model")?;
    let bundle = read_bundle(required(&c.data, "data")?)?;
    let preds = predict(&model, &bundle, None)?;
    // worst-environment Brier score of the raw model
    let before = preds
        .envs
        .iter()
        .map(|e| {
            e.confidences
                .iter()
                .zip(&e.labels)
                .map(|(f, y)| (f - y).powi(2))
                .sum::<f64>()
                / e.labels.len() as f64
        })
        .fold(0.0f64, f64::max);
    let (cal, converged, lower_bound, iterations) = match c.method {
        Method::Naive => (
            Calibrator::Naive {
                map: calibrate_naive(&preds)?,
            },
            None,
            None,
            None,
        ),
        Method::Platt => {
            let (f, y) = preds.pooled();
            (
                Calibrator::Platt {
                    map: fit_platt(&f, &y)?,
                },
                None,
                None,
                None,
            )
        }
        Method::Robust => {
            let fit = calibrate_robust(
                &preds,
                &RobustOptions {
                    max_iter: c.max_iter,
                    tol: c.tol,
                },
            )?;
            (
                Calibrator::Robust { map: fit.map },
                Some(fit.converged),
                Some(fit.lower_bound),
                Some(fit.iterations),
            )
        }
    };
    let after = worst_env_squared_error(&cal, &preds)?;
    let path = write(out, "calibrator.json", &to_json(&cal)?)?;
    let result = CalibrateResult {
        calibrator: path.clone(),
        worst_env_squared_error_before: before,
        worst_env_squared_error_after: after,
        converged,
        lower_bound,
        iterations,
    };
    write(
        out,
        "calibrate_report.json",
        &report_json("calibrate", &run, &result)?,
    )?;
    let mut s = format!(
        "worst-environment squared error {before:.6} -> {after:.6} -> {}\n",
        path.display()
    );
    if converged == Some(false) {
        eprintln!(
            "warning: robust calibration did not converge within {} iterations",
            c.max_iter
        );
        s.push_str("robust calibration not converged (flagged in report)\n");
    }
    Ok(s)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    calibrator: Option<PathBuf>,
    bins: usize,
    gamma: f64,
    landscape_envs: Vec<Pair>,
    grid: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            calibrator: None,
            bins: DEFAULT_BINS,
            gamma: KernelSpec::default().gamma,
            landscape_envs: vec![],
            grid: DEFAULT_GRID,
        }
    }
}

#[derive(Serialize)]
struct EvaluateResult {
    metrics: MetricReport,
    pooled: OodReport,
    bins: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    landscape: Option<PathBuf>,
}

fn evaluate(out: &Path, run: Resolved<EvaluateConfig>) -> Result<String, CliError> {
    let c = &run.config;
    let model: Model = read_json(required(&c.model, "model")?, "model")?;
    if !model.is_classifier() {
        return Err(invalid("evaluate scores classifiers only"));
    }
    let bundle = read_bundle(required(&c.data, "data")?)?;
    let cal = c
        .calibrator
        .as_deref()
        .map(|p| read_json::<Calibrator>(p, "calibrator"))
        .transpose()?;
    let preds = predict(&model, &bundle, cal.as_ref())?;
    let metrics = metric_report(&preds, c.bins, &kernel(c.gamma)?)?;
    let (f, y) = preds.pooled();
    let pooled = mdcal::selection::evaluate_predictions(&f, &y, c.bins)?;
    let bins = write(out, "bins.csv", &reliability_bins(&f, &y, c.bins)?.to_csv())?;
    let landscape = if c.landscape_envs.is_empty() {
        None
    } else {
        let envs = c
            .landscape_envs
            .iter()
            .map(|&p| two_bit(p))
            .collect::<Result<Vec<_>, _>>()?;
        let l = two_bit_population_penalties(&envs, c.grid, &kernel(c.gamma)?)?;
        Some(write(out, "landscape.csv", &l.to_csv())?)
    };
    let mut s = String::new();
    for (id, m) in &metrics.per_env {
        let _ = writeln!(
            s,
            "{id}: ece {:.4} mmce {:.6} brier {:.4}",
            m.ece, m.mmce, m.brier
        );
    }
    let _ = writeln!(
        s,
        "mean ece {:.4}, max ece {:.4}, accuracy {:.4}",
        metrics.mean_ece, metrics.max_ece, pooled.accuracy
    );
    let result = EvaluateResult {
        metrics,
        pooled,
        bins,
        landscape,
    };
    write(
        out,
        "evaluate_report.json",
        &report_json("evaluate", &run, &result)?,
    )?;
    Ok(s)
}

// ---------------------------------------------------------------- select

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelectConfig {
    candidates: Vec<String>,
    data: Option<PathBuf>,
    test: Option<PathBuf>,
    mode: SelectMode,
    threshold: Option<f64>,
    bins: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            candidates: vec![],
            data: None,
            test: None,
            mode: SelectMode::WorstCase,
            threshold: None,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Serialize)]
struct SelectResult {
    selection: SelectionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    ood: Option<BTreeMap<String, OodReport>>,
    csv: PathBuf,
}

fn select(out: &Path, run: Resolved<SelectConfig>) -> Result<String, CliError> {
    let c = &run.config;
    if c.candidates.is_empty() {
        return Err(invalid("at least one --candidate is required"));
    }
    let mut models = Vec::with_capacity(c.candidates.len());
    for item in &c.candidates {
        let (id, path) = match item.split_once('=') {
            Some((id, p)) => (id.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(item);
                let id = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(item)
                    .to_string();
                (id, p)
            }
        };
        models.push(Candidate {
            id,
            model: read_json(&path, "model")?,
        });
    }
    let validation = read_bundle(required(&c.data, "data")?)?;
    let pool = CandidatePool::new(models, validation)?;
    let report = match c.mode {
        SelectMode::WorstCase => select_worst_case_ece(&pool, c.bins)?,
        SelectMode::Threshold => {
            select_threshold_avg_ece(&pool, *required(&c.threshold, "threshold")?, c.bins)?
        }
    };
    let ood = match &c.test {
        None => None,
        Some(p) => {
            let test = read_bundle(p)?;
            let mut m = BTreeMap::new();
            for cand in pool.models() {
                m.insert(
                    cand.id.clone(),
                    evaluate_ood(&cand.model, None, &test, c.bins)?,
                );
            }
            Some(m)
        }
    };
    let csv = write(out, "selection.csv", &report.to_csv())?;
    let mut s = String::new();
    for (j, id) in report.model_ids.iter().enumerate() {
        let _ = writeln!(
            s,
            "{id}: worst ece {:.4}, mean ece {:.4}, val acc {:.4}",
            report.worst_ece[j], report.mean_ece[j], report.val_acc[j]
        );
    }
    match (&report.chosen, &report.diagnostic) {
        (Some(id), _) => {
            let _ = writeln!(s, "selected {id}");
        }
        (None, Some(d)) => {
            let _ = writeln!(s, "no selection: {d}");
        }
        (None, None) => {}
    }
    let result = SelectResult {
        selection: report,
        ood,
        csv,
    };
    write(
        out,
        "selection_report.json",
        &report_json("select", &run, &result)?,
    )?;
    Ok(s)
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VerifyConfig {
    theorem: u8,
    mode: VerifyMode,
    spec: Option<PathBuf>,
    d_ns: usize,
    d_c: usize,
    d_sp: usize,
    k: Option<usize>,
    spurious_strength: Option<f64>,
    starts: usize,
    probes: usize,
    n: usize,
    lambdas: Vec<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let t = Thm1Options::default();
        Self {
            theorem: 1,
            mode: VerifyMode::ConstraintSearch,
            spec: None,
            d_ns: 3,
            d_c: 2,
            d_sp: 2,
            k: None,
            spurious_strength: None,
            starts: t.starts,
            probes: t.num_probes,
            n: t.n_per_env,
            lambdas: vec![],
        }
    }
}

fn verify(out: &Path, run: Resolved<VerifyConfig>) -> Result<String, CliError> {
    let c = &run.config;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let report: VerificationReport = match c.theorem {
        1 => {
            let training = c.mode == VerifyMode::TrainClove;
            let spec = match &c.spec {
                Some(p) => read_json::<GaussianEnvSpecA>(p, "setting A spec")?,
                None => {
                    let strength = c
                        .spurious_strength
                        .unwrap_or(if training { 4.0 } else { 0.0 });
                    GaussianEnvSpecA::sample(c.d_ns, c.d_sp, c.k.unwrap_or(5), strength, &mut rng)
                }
            };
            let mut opts = Thm1Options {
                starts: c.starts,
                num_probes: c.probes,
                seed: run.seed,
                n_per_env: c.n,
                ..Thm1Options::default()
            };
            opts.hyper.seed = run.seed;
            if !c.lambdas.is_empty() {
                opts.lambdas = c.lambdas.clone();
            }
            let mode = if training {
                Thm1Mode::TrainClove
            } else {
                Thm1Mode::ConstraintSearch
            };
            verify_theorem1(&spec, mode, &opts)?
        }
        2 => {
            let spec = match &c.spec {
                Some(p) => read_json::<GaussianEnvSpecB>(p, "setting B spec")?,
                None => GaussianEnvSpecB::sample(c.d_c, c.d_sp, c.k.unwrap_or(6), &mut rng),
            };
            verify_theorem2(
                &spec,
                &Thm2Options {
                    starts: c.starts,
                    seed: run.seed,
                },
            )?
        }
        t => return Err(invalid(format!("theorem must be 1 or 2, got {t}"))),
    };
    write(
        out,
        "verify_report.json",
        &report_json("verify", &run, &report)?,
    )?;
    let mut s = format!("{}: passes = {}\n", report.theorem, report.passes);
    if let Some(sp) = report.spurious_norm {
        let _ = writeln!(s, "spurious norm {sp:.3e}");
    }
    for n in &report.notes {
        let _ = writeln!(s, "{n}");
    }
    Ok(s)
}

// ---------------------------------------------------------------- landscape

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LandscapeConfig {
    envs: Vec<Pair>,
    test_env: Pair,
    grid: usize,
    gamma: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            envs: vec![Pair(0.1, 0.05), Pair(0.2, 0.05)],
            test_env: Pair(0.9, 0.05),
            grid: DEFAULT_GRID,
            gamma: KernelSpec::default().gamma,
        }
    }
}

#[derive(Serialize)]
struct Scored {
    classifier: OddClassifier,
    train_loss: f64,
    test_loss: f64,
}

#[derive(Serialize)]
struct LandscapeResult {
    csv: PathBuf,
    invariant_feature: usize,
    /// Grid indices `(i, j)` where every training environment has MMCE below 1e-6.
    common_mmce_zeros: Vec<(usize, usize)>,
    invariant_optimum: Scored,
    irmv1_common_zeros: Vec<Scored>,
}

fn landscape(out: &Path, run: Resolved<LandscapeConfig>) -> Result<String, CliError> {
    let c = &run.config;
    let envs = c
        .envs
        .iter()
        .map(|&p| two_bit(p))
        .collect::<Result<Vec<_>, _>>()?;
    let test = two_bit(c.test_env)?;
    let l = two_bit_population_penalties(&envs, c.grid, &kernel(c.gamma)?)?;
    let csv = write(out, "landscape.csv", &l.to_csv())?;
    let score = |f: OddClassifier| Scored {
        classifier: f,
        train_loss: envs.iter().map(|e| population_loss(e, &f)).sum(),
        test_loss: population_loss(&test, &f),
    };
    let inv = score(invariant_optimum(&envs)?);
    let zeros: Vec<Scored> = irmv1_common_zeros(&envs)?.into_iter().map(score).collect();
    let mut s = format!(
        "invariant feature x{}; invariant optimum train {:.6} test {:.6}\n",
        l.invariant_feature + 1,
        inv.train_loss,
        inv.test_loss
    );
    for z in &zeros {
        let _ = writeln!(
            s,
            "IRMv1 zero p1={:.5} p2={:.5}: train {:.6} test {:.6}",
            z.classifier.p1, z.classifier.p2, z.train_loss, z.test_loss
        );
    }
    let result = LandscapeResult {
        csv,
        invariant_feature: l.invariant_feature,
        common_mmce_zeros: l.common_mmce_zeros(1e-6),
        invariant_optimum: inv,
        irmv1_common_zeros: zeros,
    };
    write(
        out,
        "landscape_report.json",
        &report_json("landscape", &run, &result)?,
    )?;
    Ok(s)
}
