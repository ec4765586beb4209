//! The four subcommands. Each one computes everything in memory and writes its outputs
//! only at the end.

use std::fs;
use std::path::{Path, PathBuf};

use fsvi::checkpoint::{config_hash, Checkpoint};
use fsvi::context::{empirical_bounds, expand_bounds, ContextConfig, ContextSource, MonochromePool};
use fsvi::data::{split, standardize, synthetic_1d, two_moons, Dataset, Standardization, SyntheticKind};
use fsvi::network::MlpSpec;
use fsvi::objective::{Likelihood, PriorMean, PriorSpec, Targets};
use fsvi::predictive::{evaluate, posterior_predictive, write_atomic, MetricsReport, PredictiveOutput};
use fsvi::seeded_rng;
use fsvi::training::{train as fit, TrainConfig};
use ndarray::{Array2, Axis};

use crate::config::{default_rates, ContextSourceSpec, DataConfig, RunConfig, Task};
use crate::error::{CliError, CliResult};
use crate::io::{entropy_csv, features_of, header_for, load_matrix, predictive_csv, write_all};

const SPLIT_STREAM: u64 = 0x5b17_0000;
const EVAL_STREAM: u64 = 0xe7a1_0000;

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::user(format!("{}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    let out_dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::user("no output directory: pass --out or set output_dir"))?;

    let (data, target_columns) = load_data(&cfg)?;
    let (train_set, val_set, test_set) = split_data(&cfg, data)?;
    let spec = build_spec(&cfg, &train_set)?;
    let likelihood = match cfg.task {
        Task::Regression => {
            Likelihood::GaussianRegression { noise_variance: cfg.model.noise_variance.expect("validated") }
        }
        Task::Classification => Likelihood::CategoricalSoftmax,
    };
    let context = ContextConfig {
        source: context_source(&cfg.context.source, &train_set)?,
        sets: cfg.context.sets,
        points: cfg.context.points,
        minibatch_mix: cfg.context.minibatch_mix,
    };
    if context.source.dim() != spec.input_dim() {
        return Err(CliError::user(format!(
            "context source has dimension {}, the data has {} features",
            context.source.dim(),
            spec.input_dim()
        )));
    }
    let prior = PriorSpec {
        mean: PriorMean::Zero,
        variance: cfg.prior.variance,
        linearization_point: cfg.prior.linearization_point,
    };
    let mut tc = TrainConfig::new(context, likelihood, prior);
    let s = &cfg.train;
    tc.epochs = s.epochs;
    tc.batch_size = s.batch_size;
    tc.learning_rate = s.learning_rate;
    tc.schedule = s.schedule;
    tc.mc_samples = s.mc_samples;
    tc.linearization_samples = s.linearization_samples;
    tc.linearization_mode = s.linearization_mode;
    tc.kl_scale = s.kl_scale;
    tc.grad_policy = s.grad_policy;
    tc.init_sigma = s.init_sigma;
    tc.validation_samples = s.validation_samples;
    tc.seed = cfg.seed;

    let outcome = fit(&spec, &train_set, val_set.as_ref(), &tc)?;
    let posterior = match (&outcome.best, s.keep_best) {
        (Some(best), true) => best.posterior.clone(),
        _ => outcome.posterior.clone(),
    };
    let ck = Checkpoint {
        spec: spec.clone(),
        posterior,
        likelihood,
        feature_stats: train_set.feature_stats.clone(),
        target_stats: train_set.target_stats.clone(),
        target_columns,
        config_hash: config_hash(&RunConfig { output_dir: None, ..cfg.clone() })?,
    };

    let ev = &cfg.evaluation;
    let eval_set = test_set.as_ref().unwrap_or(&train_set);
    let mut rng = seeded_rng(cfg.seed ^ EVAL_STREAM);
    let ood = match &ev.ood_path {
        Some(p) => Some(load_inputs(&ck, p, ev.ood_header)?),
        None => None,
    };
    let rates = ev.referral_rates.clone().unwrap_or_else(|| default_rates(eval_set.len()));
    let mut files = assess(&ck, eval_set, ood.as_ref(), &rates, ev.samples, &mut rng)?;
    if let Some(g) = &ev.grid {
        files.push(("grid.csv", grid_csv(&ck, g.lo, g.hi, g.steps, ev.samples, &mut rng)?));
    }
    files.push(("checkpoint.fsvi", ck.to_string()?));
    files.push(("history_steps.csv", outcome.history.steps_csv()));
    files.push(("history_epochs.csv", outcome.history.epochs_csv()));
    files.push(("config.json", serde_json::to_string_pretty(&cfg)? + "\n"));
    write_all(&out_dir, &files)
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub ood: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub samples: usize,
    pub rates: Option<Vec<f64>>,
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> CliResult<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let table = load_matrix(&args.data, None)?;
    let d = ck.spec.input_dim();
    if table.ncols() != d + ck.target_columns.len() {
        return Err(CliError::user(format!(
            "{}: expected {} columns ({d} features and {} targets), found {}",
            args.data.display(),
            d + ck.target_columns.len(),
            ck.target_columns.len(),
            table.ncols()
        )));
    }
    let raw = dataset_from_table(
        table,
        &ck.target_columns,
        matches!(ck.likelihood, Likelihood::CategoricalSoftmax),
    )?;
    let data = apply_stats(raw, ck.feature_stats.as_ref(), ck.target_stats.as_ref());
    let ood = match &args.ood {
        Some(p) => Some(load_inputs(&ck, p, None)?),
        None => None,
    };
    let rates = args.rates.clone().unwrap_or_else(|| default_rates(data.len()));
    let mut rng = seeded_rng(args.seed ^ EVAL_STREAM);
    let files = assess(&ck, &data, ood.as_ref(), &rates, args.samples, &mut rng)?;
    write_all(&args.out, &files)
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub samples: usize,
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let x = load_inputs(&ck, &args.data, None)?;
    let mut rng = seeded_rng(args.seed ^ EVAL_STREAM);
    let pred = predict_original_units(&ck, &x, args.samples, &mut rng)?;
    write_atomic(&args.out, predictive_csv(&pred).as_bytes())?;
    Ok(())
}

pub struct DatagenArgs {
    pub generator: String,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn datagen(args: &DatagenArgs) -> CliResult<()> {
    let mut rng = seeded_rng(args.seed);
    let data = match args.generator.as_str() {
        "two_moons" => two_moons(args.n, args.noise, &mut rng)?,
        "gap_sine" => synthetic_1d(SyntheticKind::GapSine, args.n, args.noise, &mut rng)?,
        other => {
            return Err(CliError::user(format!(
                "unknown generator {other:?}; expected two_moons or gap_sine"
            )))
        }
    };
    write_atomic(&args.out, dataset_csv(&data).as_bytes())?;
    Ok(())
}

fn dataset_csv(data: &Dataset) -> String {
    let y = match &data.y {
        Targets::Real(y) => y.clone(),
        Targets::Class(c) => Array2::from_shape_fn((c.len(), 1), |(i, _)| c[i] as f64),
    };
    let mut header: Vec<String> = (0..data.x.ncols()).map(|j| format!("x{j}")).collect();
    header.extend((0..y.ncols()).map(|j| if y.ncols() == 1 { "y".to_string() } else { format!("y{j}") }));
    let all = ndarray::concatenate(Axis(1), &[data.x.view(), y.view()]).expect("same rows");
    crate::io::csv_of(&header, all.view())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

/// Reads a feature table (targets optional) and maps it to the model's input space.
fn load_inputs(ck: &Checkpoint, path: &Path, header: Option<bool>) -> CliResult<Array2<f64>> {
    let table = load_matrix(path, header)?;
    let x = features_of(table, ck.spec.input_dim(), &ck.target_columns)?;
    Ok(match &ck.feature_stats {
        Some(s) => s.apply(x.view()),
        None => x,
    })
}

fn predict_original_units(
    ck: &Checkpoint,
    x: &Array2<f64>,
    samples: usize,
    rng: &mut fsvi::Rng,
) -> CliResult<PredictiveOutput> {
    let pred = posterior_predictive(&ck.posterior, &ck.spec, x.view(), &ck.likelihood, samples, rng)?;
    Ok(match &ck.target_stats {
        Some(s) => pred.unstandardize(s),
        None => pred,
    })
}

/// Metrics, per-point entropies and the selective-prediction curve for `data`.
fn assess(
    ck: &Checkpoint,
    data: &Dataset,
    ood: Option<&Array2<f64>>,
    rates: &[f64],
    samples: usize,
    rng: &mut fsvi::Rng,
) -> CliResult<Vec<(&'static str, String)>> {
    let pred = posterior_predictive(&ck.posterior, &ck.spec, data.x.view(), &ck.likelihood, samples, rng)?;
    let entropy = match &ck.target_stats {
        Some(s) => pred.unstandardize(s).entropy(),
        None => pred.entropy(),
    };
    let raw_x = invert_features(ck, &data.x);
    let mut files = vec![("entropy_eval.csv", entropy_csv(raw_x.view(), entropy.view()))];
    let ood_entropy = match ood {
        Some(x) => {
            let p = posterior_predictive(&ck.posterior, &ck.spec, x.view(), &ck.likelihood, samples, rng)?;
            let e = match &ck.target_stats {
                Some(s) => p.unstandardize(s).entropy(),
                None => p.entropy(),
            };
            files.push(("entropy_ood.csv", entropy_csv(invert_features(ck, x).view(), e.view())));
            Some(e.to_vec())
        }
        None => None,
    };
    let report: MetricsReport =
        evaluate(&pred, &data.y, ck.target_stats.as_ref(), ood_entropy.as_deref(), rates)?;
    files.push(("metrics.json", report.to_json()? + "\n"));
    files.push(("selective.csv", report.selective_csv()));
    Ok(files)
}

fn invert_features(ck: &Checkpoint, x: &Array2<f64>) -> Array2<f64> {
    match &ck.feature_stats {
        Some(s) => s.invert(x.view()),
        None => x.clone(),
    }
}

/// Predictive summary on a regular grid in original feature units (1-D or 2-D inputs).
fn grid_csv(
    ck: &Checkpoint,
    lo: f64,
    hi: f64,
    steps: usize,
    samples: usize,
    rng: &mut fsvi::Rng,
) -> CliResult<String> {
    let d = ck.spec.input_dim();
    let axis: Vec<f64> = (0..steps).map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64).collect();
    let raw = match d {
        1 => Array2::from_shape_fn((steps, 1), |(i, _)| axis[i]),
        2 => {
            Array2::from_shape_fn(
                (steps * steps, 2),
                |(i, j)| if j == 0 { axis[i / steps] } else { axis[i % steps] },
            )
        }
        _ => {
            return Err(CliError::user(format!(
                "evaluation.grid needs 1 or 2 input features, the model has {d}"
            )))
        }
    };
    let x = match &ck.feature_stats {
        Some(s) => s.apply(raw.view()),
        None => raw.clone(),
    };
    let pred = predict_original_units(ck, &x, samples, rng)?;
    let body = predictive_csv(&pred);
    let mut lines = body.lines();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push(lines.next().unwrap_or("").to_string());
    let mut s = header.join(",") + "\n";
    for (row, line) in raw.rows().into_iter().zip(lines) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{},{line}\n", cells.join(",")));
    }
    Ok(s)
}

fn dataset_from_table(table: Array2<f64>, targets: &[usize], classification: bool) -> CliResult<Dataset> {
    if let Some(c) = targets.iter().find(|c| **c >= table.ncols()) {
        return Err(CliError::user(format!(
            "target column {c} is out of range for {} columns",
            table.ncols()
        )));
    }
    let keep: Vec<usize> = (0..table.ncols()).filter(|c| !targets.contains(c)).collect();
    let x = table.select(Axis(1), &keep);
    let y = table.select(Axis(1), targets);
    let data = Dataset::new(x, Targets::Real(y))?;
    Ok(if classification { data.into_classification()? } else { data })
}

fn apply_stats(data: Dataset, fs: Option<&Standardization>, ts: Option<&Standardization>) -> Dataset {
    let x = match fs {
        Some(s) => s.apply(data.x.view()),
        None => data.x,
    };
    let y = match (data.y, ts) {
        (Targets::Real(y), Some(s)) => Targets::Real(s.apply(y.view())),
        (y, _) => y,
    };
    Dataset { x, y, feature_stats: fs.cloned(), target_stats: ts.cloned() }
}

/// The full dataset plus the CSV columns its targets came from.
fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Vec<usize>)> {
    let classification = cfg.task == Task::Classification;
    let mut rng = seeded_rng(cfg.seed ^ SPLIT_STREAM);
    let (data, targets) = match &cfg.data {
        DataConfig::Csv { path, target_columns, header, .. } => {
            let table = load_matrix(path, *header)?;
            let targets = target_columns.clone().unwrap_or_else(|| vec![table.ncols() - 1]);
            if targets.is_empty() || targets.len() >= table.ncols() {
                return Err(CliError::user("target_columns must leave at least one feature column"));
            }
            (dataset_from_table(table, &targets, classification)?, targets)
        }
        DataConfig::TwoMoons { n, noise, .. } => (two_moons(*n, *noise, &mut rng)?, vec![2]),
        DataConfig::GapSine { n, noise, .. } => {
            (synthetic_1d(SyntheticKind::GapSine, *n, *noise, &mut rng)?, vec![1])
        }
    };
    if let (Targets::Class(labels), Some(q)) = (&data.y, cfg.model.classes) {
        if let Some(l) = labels.iter().find(|l| **l >= q) {
            return Err(CliError::user(format!("label {l} is out of range for {q} classes")));
        }
    }
    Ok((data, targets))
}

fn split_data(cfg: &RunConfig, data: Dataset) -> CliResult<(Dataset, Option<Dataset>, Option<Dataset>)> {
    let mut rng = seeded_rng(cfg.seed ^ SPLIT_STREAM ^ 1);
    let (test_fraction, val_fraction) = cfg.data.fractions();
    let (pool, test) = match &cfg.data {
        DataConfig::Csv { test_path: Some(p), target_columns, .. } => {
            let table = fsvi::data::load_matrix(p, header_for(p, None)?)?;
            let targets = target_columns.clone().unwrap_or_else(|| vec![table.ncols() - 1]);
            let test = dataset_from_table(table, &targets, cfg.task == Task::Classification)?;
            (data, Some(test))
        }
        _ if test_fraction > 0.0 => {
            let mut parts = split(&data, &[1.0 - test_fraction, test_fraction], &mut rng)?;
            let test = parts.pop();
            (parts.pop().expect("two parts"), test)
        }
        _ => (data, None),
    };
    let (train, val) = if val_fraction > 0.0 {
        let mut parts = split(&pool, &[1.0 - val_fraction, val_fraction], &mut rng)?;
        let val = parts.pop();
        (parts.pop().expect("two parts"), val)
    } else {
        (pool, None)
    };
    for (name, d) in [("training", Some(&train)), ("validation", val.as_ref()), ("test", test.as_ref())] {
        if d.is_some_and(|d| d.is_empty()) {
            return Err(CliError::user(format!("the {name} split is empty")));
        }
    }
    if !cfg.data.standardize() {
        return Ok((train, val, test));
    }
    let others: Vec<Dataset> = val.iter().chain(test.iter()).cloned().collect();
    let (train, mut rest) = standardize(&train, &others)?;
    let test = if test.is_some() { rest.pop() } else { None };
    let val = if val.is_some() { rest.pop() } else { None };
    Ok((train, val, test))
}

fn build_spec(cfg: &RunConfig, train: &Dataset) -> CliResult<MlpSpec> {
    let q = match (&train.y, cfg.model.classes) {
        (Targets::Class(_), Some(c)) => c,
        (Targets::Real(y), _) => y.ncols(),
        _ => return Err(CliError::user("classification needs model.classes")),
    };
    let mut sizes = vec![train.x.ncols()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(q);
    Ok(MlpSpec::with_activation(sizes, cfg.model.activation)?)
}

fn context_source(spec: &ContextSourceSpec, train: &Dataset) -> CliResult<ContextSource> {
    Ok(match spec {
        ContextSourceSpec::UniformBox { bounds } => ContextSource::UniformBox { bounds: bounds.clone() },
        ContextSourceSpec::EmpiricalBox { expand } => {
            ContextSource::UniformBox { bounds: expand_bounds(&empirical_bounds(train.x.view())?, *expand) }
        }
        ContextSourceSpec::Monochrome { channels } => {
            ContextSource::Monochrome { pool: MonochromePool::from_images(train.x.view(), *channels)? }
        }
        ContextSourceSpec::Auxiliary { path, header } => {
            let raw = load_matrix(path, *header)?;
            let data = match &train.feature_stats {
                Some(s) if raw.ncols() == s.mean.len() => s.apply(raw.view()),
                _ => raw,
            };
            ContextSource::Auxiliary { data }
        }
    })
}
