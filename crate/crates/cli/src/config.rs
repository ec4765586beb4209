//! The JSON run configuration consumed by `fsvi train`.

use std::path::PathBuf;

use fsvi::context::Interval;
use fsvi::linearization::LinearizationMode;
use fsvi::network::Activation;
use fsvi::objective::{GradPolicy, LinearizationPoint};
use fsvi::training::LrSchedule;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA: &str = "fsvi-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub task: Task,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub context: ContextSpec,
    pub prior: PriorConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Number of classes; required for classification.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Gaussian observation noise in standardized target units; required for regression.
    #[serde(default)]
    pub noise_variance: Option<f64>,
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Csv {
        path: PathBuf,
        /// Defaults to the last column.
        #[serde(default)]
        target_columns: Option<Vec<usize>>,
        #[serde(default)]
        header: Option<bool>,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default)]
        test_fraction: f64,
        #[serde(default)]
        validation_fraction: f64,
        #[serde(default = "yes")]
        standardize: bool,
    },
    TwoMoons {
        n: usize,
        noise: f64,
        #[serde(default)]
        test_fraction: f64,
        #[serde(default)]
        validation_fraction: f64,
        #[serde(default)]
        standardize: bool,
    },
    GapSine {
        n: usize,
        noise: f64,
        #[serde(default)]
        test_fraction: f64,
        #[serde(default)]
        validation_fraction: f64,
        #[serde(default)]
        standardize: bool,
    },
}

fn yes() -> bool {
    true
}

impl DataConfig {
    pub fn fractions(&self) -> (f64, f64) {
        match self {
            DataConfig::Csv { test_fraction, validation_fraction, .. }
            | DataConfig::TwoMoons { test_fraction, validation_fraction, .. }
            | DataConfig::GapSine { test_fraction, validation_fraction, .. } => {
                (*test_fraction, *validation_fraction)
            }
        }
    }

    pub fn standardize(&self) -> bool {
        match self {
            DataConfig::Csv { standardize, .. }
            | DataConfig::TwoMoons { standardize, .. }
            | DataConfig::GapSine { standardize, .. } => *standardize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub source: ContextSourceSpec,
    #[serde(default = "one")]
    pub sets: usize,
    pub points: usize,
    #[serde(default)]
    pub minibatch_mix: f64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextSourceSpec {
    UniformBox {
        bounds: Vec<Interval>,
    },
    /// Box spanned by the (standardized) training features, widened by `expand`·width.
    EmpiricalBox {
        #[serde(default)]
        expand: f64,
    },
    Monochrome {
        channels: usize,
    },
    Auxiliary {
        path: PathBuf,
        #[serde(default)]
        header: Option<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub variance: f64,
    #[serde(default = "shared_point")]
    pub linearization_point: LinearizationPoint,
}

fn shared_point() -> LinearizationPoint {
    LinearizationPoint::SharedVariationalMean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub mc_samples: usize,
    pub linearization_samples: usize,
    pub linearization_mode: LinearizationMode,
    pub kl_scale: f64,
    pub grad_policy: GradPolicy,
    pub init_sigma: f64,
    pub validation_samples: usize,
    /// Keep the posterior with the best validation log-likelihood instead of the last one.
    pub keep_best: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            mc_samples: 5,
            linearization_samples: 1,
            linearization_mode: LinearizationMode::McPartition,
            kl_scale: 1.0,
            grad_policy: GradPolicy::StopGradJacobian,
            init_sigma: fsvi::objective::DEFAULT_INIT_SIGMA,
            validation_samples: 20,
            keep_best: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub ood_path: Option<PathBuf>,
    pub ood_header: Option<bool>,
    /// Defaults to 0, 0.1, ..., 0.9, skipping rates that would refer every point.
    pub referral_rates: Option<Vec<f64>>,
    pub samples: usize,
    /// Square grid over which predictive entropy is written, e.g. for 2-D decision plots.
    pub grid: Option<GridSpec>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { ood_path: None, ood_header: None, referral_rates: None, samples: 100, grid: None }
    }
}

pub fn default_rates(n: usize) -> Vec<f64> {
    (0..10).map(|k| k as f64 / 10.0).filter(|r| ((r * n as f64) - 1e-9).ceil() < n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::user(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::user(format!("config: {m}")));
        if self.schema != SCHEMA {
            return bad(format!("schema {:?} is not supported, expected {SCHEMA:?}", self.schema));
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        match self.task {
            Task::Regression => match self.model.noise_variance {
                Some(v) if v > 0.0 && v.is_finite() => {}
                Some(v) => return bad(format!("noise_variance must be positive, got {v}")),
                None => return bad("regression needs model.noise_variance".into()),
            },
            Task::Classification => match self.model.classes {
                Some(c) if c >= 2 => {}
                _ => return bad("classification needs model.classes >= 2".into()),
            },
        }
        if matches!(self.data, DataConfig::GapSine { .. }) && self.task != Task::Regression {
            return bad("gap_sine data is a regression task".into());
        }
        if matches!(self.data, DataConfig::TwoMoons { .. })
            && (self.task != Task::Classification || self.model.classes != Some(2))
        {
            return bad("two_moons data is a 2-class classification task".into());
        }
        let (t, v) = self.data.fractions();
        if !(0.0..1.0).contains(&t) || !(0.0..1.0).contains(&v) {
            return bad("test_fraction and validation_fraction must lie in [0, 1)".into());
        }
        if self.train.keep_best && v == 0.0 {
            return bad("keep_best needs a validation_fraction above 0".into());
        }
        let ev = &self.evaluation;
        if ev.samples == 0 {
            return bad("evaluation.samples must be positive".into());
        }
        if let Some(g) = &ev.grid {
            if g.steps < 2 || !(g.hi > g.lo) {
                return bad("evaluation.grid needs hi > lo and at least 2 steps".into());
            }
        }
        Ok(())
    }
}
