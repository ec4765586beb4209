//! Posterior predictive and uncertainty metrics.
//!
//! Every reduction runs sequentially in index order so reports are reproducible bit for bit.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{dim_mismatch, FsviError, Result};
use crate::network::MlpSpec;
use crate::objective::{log_softmax_row, Likelihood, Targets, VariationalPosterior};
use crate::par;

pub const DEFAULT_PREDICTIVE_SAMPLES: usize = 50;
pub const DEFAULT_ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveOutput {
    /// Per-point mean and variance of the Gaussian predictive (N×Q each).
    Regression { mean: Array2<f64>, variance: Array2<f64> },
    /// Mean of the softmax draws (N×Q).
    Classification { probs: Array2<f64> },
}

impl PredictiveOutput {
    pub fn len(&self) -> usize {
        match self {
            PredictiveOutput::Regression { mean, .. } => mean.nrows(),
            PredictiveOutput::Classification { probs } => probs.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predictive entropy per point in nats; for regression, the differential entropy of
    /// the Gaussian predictive.
    pub fn entropy(&self) -> Array1<f64> {
        match self {
            PredictiveOutput::Regression { variance, .. } => variance
                .rows()
                .into_iter()
                .map(|r| {
                    r.iter().map(|v| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln()).sum()
                })
                .collect(),
            PredictiveOutput::Classification { probs } => predictive_entropy(probs.view()),
        }
    }

    /// Maps a regression predictive back to original target units.
    pub fn unstandardize(&self, stats: &Standardization) -> PredictiveOutput {
        match self {
            PredictiveOutput::Regression { mean, variance } => {
                let mut var = variance.clone();
                for mut row in var.rows_mut() {
                    for (v, s) in row.iter_mut().zip(&stats.std) {
                        *v *= s * s;
                    }
                }
                PredictiveOutput::Regression { mean: stats.invert(mean.view()), variance: var }
            }
            other => other.clone(),
        }
    }
}

/// Monte Carlo predictive from `M*` draws of the unlinearized network.
pub fn posterior_predictive<R: Rng + ?Sized>(
    q: &VariationalPosterior,
    spec: &MlpSpec,
    x: ArrayView2<f64>,
    likelihood: &Likelihood,
    samples: usize,
    rng: &mut R,
) -> Result<PredictiveOutput> {
    if samples == 0 {
        return Err(FsviError::InvalidParameter("M* must be at least 1".into()));
    }
    if q.len() != spec.num_params() {
        return Err(dim_mismatch("posterior length", spec.num_params(), q.len()));
    }
    likelihood.validate()?;
    let p = q.len();
    let noise: Vec<Vec<f64>> =
        (0..samples).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let outputs = par::map_slice(&noise, |eps| spec.forward(&q.reparameterize(eps), x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let m = samples as f64;
    let shape = (x.nrows(), spec.output_dim());
    match likelihood {
        Likelihood::GaussianRegression { noise_variance } => {
            let mut mean = Array2::<f64>::zeros(shape);
            for o in &outputs {
                mean += o;
            }
            mean /= m;
            let mut var = Array2::<f64>::zeros(shape);
            for o in &outputs {
                let d = o - &mean;
                var += &(&d * &d);
            }
            var /= m;
            var += *noise_variance;
            Ok(PredictiveOutput::Regression { mean, variance: var })
        }
        Likelihood::CategoricalSoftmax => {
            let mut probs = Array2::<f64>::zeros(shape);
            for o in &outputs {
                for (mut dst, row) in probs.rows_mut().into_iter().zip(o.rows()) {
                    dst += &log_softmax_row(row).mapv(f64::exp);
                }
            }
            probs /= m;
            Ok(PredictiveOutput::Classification { probs })
        }
    }
}

fn check_simplex(probs: ArrayView2<f64>) -> Result<()> {
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-6 {
            return Err(FsviError::InvalidParameter(format!(
                "row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

fn argmax_row(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Expected calibration error over equal-width confidence bins `[b/B, (b+1)/B)`, the last
/// bin closed.
pub fn ece(probs: ArrayView2<f64>, labels: &[usize], bins: usize) -> Result<f64> {
    if probs.nrows() == 0 {
        return Err(FsviError::EmptyInput("ece needs at least one prediction".into()));
    }
    if labels.len() != probs.nrows() {
        return Err(dim_mismatch("ece labels", probs.nrows(), labels.len()));
    }
    if bins == 0 {
        return Err(FsviError::InvalidParameter("ece needs at least one bin".into()));
    }
    check_simplex(probs)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        let pred = argmax_row(row);
        let c = row[pred];
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if pred == label {
            correct[b] += 1.0;
        }
    }
    let n = probs.nrows() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let nb = count[b] as f64;
            total += (nb / n) * (correct[b] / nb - conf[b] / nb).abs();
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

/// `P(out > in) + ½ P(out = in)` by exhaustive pair counting.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(FsviError::EmptyInput("auroc needs scores for both sets".into()));
    }
    let mut wins = 0.0;
    for o in scores_out {
        for i in scores_in {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (scores_in.len() as f64 * scores_out.len() as f64))
}

/// Mean squared distance between probability vectors and one-hot labels.
pub fn brier(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.nrows() {
        return Err(dim_mismatch("brier labels", probs.nrows(), labels.len()));
    }
    if probs.nrows() == 0 {
        return Err(FsviError::EmptyInput("brier needs at least one prediction".into()));
    }
    let mut total = 0.0;
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        if label >= row.len() {
            return Err(FsviError::InvalidParameter(format!("label {label} out of range")));
        }
        total += row
            .iter()
            .enumerate()
            .map(|(q, p)| {
                let t = if q == label { 1.0 } else { 0.0 };
                (p - t) * (p - t)
            })
            .sum::<f64>();
    }
    Ok(total / probs.nrows() as f64)
}

/// `−Σ p ln p` per row, with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: ArrayView2<f64>) -> Array1<f64> {
    probs
        .rows()
        .into_iter()
        .map(|r| -r.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .collect()
}

pub fn accuracy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.nrows() {
        return Err(dim_mismatch("accuracy labels", probs.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(FsviError::EmptyInput("accuracy needs at least one prediction".into()));
    }
    let hits = probs.rows().into_iter().zip(labels).filter(|(r, l)| argmax_row(r.view()) == **l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn rmse(mean: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    if mean.dim() != targets.dim() {
        return Err(dim_mismatch("rmse rows", mean.nrows(), targets.nrows()));
    }
    if mean.is_empty() {
        return Err(FsviError::EmptyInput("rmse needs at least one point".into()));
    }
    let sse: f64 = mean.iter().zip(targets.iter()).map(|(m, t)| (m - t) * (m - t)).sum();
    Ok((sse / mean.len() as f64).sqrt())
}

/// Mean over points of the Gaussian negative log density (summed over outputs).
pub fn gaussian_nll(
    mean: ArrayView2<f64>,
    variance: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<f64> {
    if mean.dim() != targets.dim() || variance.dim() != targets.dim() {
        return Err(dim_mismatch("nll rows", mean.nrows(), targets.nrows()));
    }
    if mean.nrows() == 0 {
        return Err(FsviError::EmptyInput("nll needs at least one point".into()));
    }
    let total: f64 = mean
        .iter()
        .zip(variance.iter())
        .zip(targets.iter())
        .map(|((m, v), t)| 0.5 * (2.0 * std::f64::consts::PI * v).ln() + (t - m) * (t - m) / (2.0 * v))
        .sum();
    Ok(total / mean.nrows() as f64)
}

/// Mean over points of `−ln p(y)` under class probabilities.
pub fn categorical_nll(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.nrows() {
        return Err(dim_mismatch("nll labels", probs.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(FsviError::EmptyInput("nll needs at least one point".into()));
    }
    let total: f64 =
        probs.rows().into_iter().zip(labels).map(|(r, &l)| -r[l].max(f64::MIN_POSITIVE).ln()).sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivePoint {
    pub referral_rate: f64,
    pub metric: f64,
}

/// Indices kept after referring the `⌈γN⌉` most uncertain points. Among equal
/// uncertainties the higher index is referred first.
pub fn retained_indices(uncertainty: &[f64], rate: f64) -> Vec<usize> {
    let n = uncertainty.len();
    let drop = ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(b.cmp(&a)));
    let mut kept: Vec<usize> = order.into_iter().skip(drop.min(n)).collect();
    kept.sort_unstable();
    kept
}

/// Metric on the retained points for each referral rate.
pub fn selective_prediction<F>(uncertainty: &[f64], metric: F, rates: &[f64]) -> Result<Vec<SelectivePoint>>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    for w in rates.windows(2) {
        if !(w[1] > w[0]) {
            return Err(FsviError::InvalidParameter("referral rates must be strictly increasing".into()));
        }
    }
    if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(FsviError::InvalidParameter("referral rates must lie in [0, 1)".into()));
    }
    rates
        .iter()
        .map(|&rate| {
            let kept = retained_indices(uncertainty, rate);
            if kept.is_empty() {
                return Err(FsviError::EmptyRetainedSet(rate));
            }
            Ok(SelectivePoint { referral_rate: rate, metric: metric(&kept)? })
        })
        .collect()
}

/// Flat summary of an evaluation; absent metrics are omitted from the JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    pub mean_entropy: f64,
    pub n: usize,
    #[serde(skip)]
    pub selective: Vec<SelectivePoint>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn selective_csv(&self) -> String {
        let mut s = String::from("referral_rate,metric\n");
        for p in &self.selective {
            s.push_str(&format!("{},{}\n", p.referral_rate, p.metric));
        }
        s
    }
}

/// Computes every applicable metric. Regression metrics are reported in original units
/// when `target_stats` is given (the targets passed in are standardized ones).
///
/// The selective-prediction metric is accuracy for classification and RMSE for regression,
/// with predictive entropy as the uncertainty.
pub fn evaluate(
    predictive: &PredictiveOutput,
    targets: &Targets,
    target_stats: Option<&Standardization>,
    ood_entropy: Option<&[f64]>,
    referral_rates: &[f64],
) -> Result<MetricsReport> {
    if targets.len() != predictive.len() {
        return Err(dim_mismatch("evaluation targets", predictive.len(), targets.len()));
    }
    let entropy = predictive.entropy();
    let mut report = MetricsReport {
        mean_entropy: entropy.mean().unwrap_or(0.0),
        n: predictive.len(),
        ..Default::default()
    };
    let entropy = entropy.to_vec();
    match (predictive, targets) {
        (PredictiveOutput::Classification { probs }, Targets::Class(labels)) => {
            report.accuracy = Some(accuracy(probs.view(), labels)?);
            report.ece = Some(ece(probs.view(), labels, DEFAULT_ECE_BINS)?);
            report.brier = Some(brier(probs.view(), labels)?);
            report.nll = Some(categorical_nll(probs.view(), labels)?);
            report.selective = selective_prediction(
                &entropy,
                |idx| {
                    let p = probs.select(ndarray::Axis(0), idx);
                    let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    accuracy(p.view(), &l)
                },
                referral_rates,
            )?;
        }
        (PredictiveOutput::Regression { .. }, Targets::Real(y)) => {
            let (pred, y) = match target_stats {
                Some(s) => (predictive.unstandardize(s), s.invert(y.view())),
                None => (predictive.clone(), y.clone()),
            };
            let PredictiveOutput::Regression { mean, variance } = &pred else { unreachable!() };
            report.rmse = Some(rmse(mean.view(), y.view())?);
            report.nll = Some(gaussian_nll(mean.view(), variance.view(), y.view())?);
            report.selective = selective_prediction(
                &entropy,
                |idx| {
                    let m = mean.select(ndarray::Axis(0), idx);
                    let t = y.select(ndarray::Axis(0), idx);
                    rmse(m.view(), t.view())
                },
                referral_rates,
            )?;
        }
        _ => return Err(FsviError::InvalidParameter("target kind does not match the predictive".into())),
    }
    if let Some(ood) = ood_entropy {
        report.auroc = Some(auroc(&entropy, ood)?);
    }
    Ok(report)
}

/// Writes `contents` to `path` via a temporary file in the same directory, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| FsviError::Io(e.error))?;
    Ok(())
}
