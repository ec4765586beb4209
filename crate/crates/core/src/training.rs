//! Adam and the epoch/minibatch loop.

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::{assemble_contexts, ContextConfig};
use crate::data::Dataset;
use crate::error::{dim_mismatch, FsviError, Result};
use crate::gaussian::JitterSchedule;
use crate::linearization::{LinearizationConfig, LinearizationMode};
use crate::network::{init_params, InitScheme, MlpSpec};
use crate::objective::{
    elbo_grad, inverse_softplus, Batch, GradPolicy, Likelihood, ObjectiveConfig, PriorSpec,
    VariationalPosterior, DEFAULT_INIT_SIGMA,
};
use crate::predictive::{posterior_predictive, PredictiveOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], step: 0 }
    }
}

/// One bias-corrected Adam update. Returns the new state and parameters.
pub fn adam_step(
    state: &AdamState,
    params: &[f64],
    grads: &[f64],
    hyper: &AdamConfig,
    lr: f64,
) -> Result<(AdamState, Vec<f64>)> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(dim_mismatch("adam gradient length", params.len(), grads.len()));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let mut next =
        AdamState { m: Vec::with_capacity(params.len()), v: Vec::with_capacity(params.len()), step: t };
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let g = grads[k];
        let m = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * g * g;
        out.push(params[k] - lr * (m / bc1) / ((v / bc2).sqrt() + hyper.eps));
        next.m.push(m);
        next.v.push(v);
    }
    Ok((next, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Likelihood draws per step.
    pub mc_samples: usize,
    /// Linearization draws per context set.
    pub linearization_samples: usize,
    pub linearization_mode: LinearizationMode,
    pub kl_scale: f64,
    pub grad_policy: GradPolicy,
    pub seed: u64,
    pub context: ContextConfig,
    pub likelihood: Likelihood,
    pub prior: PriorSpec,
    pub init_sigma: f64,
    pub init_scheme: InitScheme,
    pub jitter: Vec<f64>,
    /// Predictive draws for the per-epoch validation log-likelihood.
    pub validation_samples: usize,
}

impl TrainConfig {
    /// Defaults for everything except the problem-specific parts.
    pub fn new(context: ContextConfig, likelihood: Likelihood, prior: PriorSpec) -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            adam: AdamConfig::default(),
            mc_samples: 5,
            linearization_samples: 1,
            linearization_mode: LinearizationMode::McPartition,
            kl_scale: 1.0,
            grad_policy: GradPolicy::StopGradJacobian,
            seed: 0,
            context,
            likelihood,
            prior,
            init_sigma: DEFAULT_INIT_SIGMA,
            init_scheme: InitScheme::UniformFanIn,
            jitter: JitterSchedule::default().levels().to_vec(),
            validation_samples: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FsviError::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FsviError::InvalidParameter("learning_rate must be positive".into()));
        }
        if !(self.init_sigma > 0.0) {
            return Err(FsviError::InvalidParameter("init_sigma must be positive".into()));
        }
        if self.validation_samples == 0 {
            return Err(FsviError::InvalidParameter("validation_samples must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(FsviError::InvalidParameter("invalid Adam hyperparameters".into()));
        }
        self.context.validate()?;
        self.likelihood.validate()?;
        self.prior.validate()?;
        JitterSchedule::new(self.jitter.clone())?;
        Ok(())
    }

    pub fn objective(&self, spec: &MlpSpec) -> Result<ObjectiveConfig> {
        let mut lin = LinearizationConfig::mc(spec).with_samples(self.linearization_samples);
        lin.mode = self.linearization_mode;
        let cfg = ObjectiveConfig {
            mc_samples: self.mc_samples,
            kl_scale: self.kl_scale,
            ell_scale: 1.0,
            linearization: lin,
            jitter: JitterSchedule::new(self.jitter.clone())?,
            grad_policy: self.grad_policy,
        };
        cfg.validate(spec)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub elbo: f64,
    pub ell: f64,
    pub fkl: f64,
    pub argmax_index: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_elbo: f64,
    /// Mean per-point predictive log-likelihood on the validation split.
    pub val_log_likelihood: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,elbo,ell,fkl,argmax_index,grad_norm\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.epoch, r.elbo, r.ell, r.fkl, r.argmax_index, r.grad_norm
            ));
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,mean_elbo,val_log_likelihood\n");
        for r in &self.epochs {
            let v = r.val_log_likelihood.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.epoch, r.mean_elbo, v));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub posterior: VariationalPosterior,
    pub epoch: usize,
    pub val_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub posterior: VariationalPosterior,
    /// Posterior with the highest validation log-likelihood, when a validation split exists.
    pub best: Option<BestCheckpoint>,
    pub history: TrainHistory,
}

/// Mean per-point predictive log-likelihood (standardized units).
pub fn predictive_log_likelihood(pred: &PredictiveOutput, data: &Dataset) -> Result<f64> {
    use crate::objective::Targets;
    match (pred, &data.y) {
        (PredictiveOutput::Regression { mean, variance }, Targets::Real(y)) => {
            Ok(-crate::predictive::gaussian_nll(mean.view(), variance.view(), y.view())?)
        }
        (PredictiveOutput::Classification { probs }, Targets::Class(l)) => {
            Ok(-crate::predictive::categorical_nll(probs.view(), l)?)
        }
        _ => Err(FsviError::InvalidParameter("target kind does not match the predictive".into())),
    }
}

/// Initial posterior: means from the init scheme, a common small standard deviation.
pub fn init_posterior(spec: &MlpSpec, config: &TrainConfig, rng: &mut crate::Rng) -> VariationalPosterior {
    let mu = init_params(spec, rng, config.init_scheme).into_inner();
    let rho = vec![inverse_softplus(config.init_sigma); mu.len()];
    VariationalPosterior { mu, rho }
}

/// Runs `epochs × ⌈N / B⌉` Adam steps on `(μ, ρ)`.
///
/// All randomness comes from `config.seed`. Validation uses a separate stream so adding a
/// validation split does not change the training trajectory.
pub fn train(
    spec: &MlpSpec,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(FsviError::EmptyInput("training split is empty".into()));
    }
    if train_data.x.ncols() != spec.input_dim() {
        return Err(dim_mismatch("training features", spec.input_dim(), train_data.x.ncols()));
    }
    config.likelihood.check_targets(train_data.len(), spec.output_dim(), &train_data.y)?;
    let mut objective = config.objective(spec)?;
    let mut rng = crate::seeded_rng(config.seed);
    let mut posterior = init_posterior(spec, config, &mut rng);
    let p = posterior.len();
    let mut adam = AdamState::new(2 * p);
    let n = train_data.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut history = TrainHistory::default();
    let mut best: Option<BestCheckpoint> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut elbo_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = train_data.x.select(Axis(0), chunk);
            let y = train_data.y.select(chunk);
            let contexts = assemble_contexts(&config.context, x.view(), &mut rng)?;
            objective.ell_scale = n as f64 / chunk.len() as f64;
            let batch = Batch { x: x.view(), y: &y };
            let g = elbo_grad(
                &posterior,
                &config.prior,
                spec,
                batch,
                &contexts,
                &config.likelihood,
                &objective,
                &mut rng,
            )?;
            let step = history.steps.len();
            let lr = config.schedule.rate(config.learning_rate, step, total_steps);
            let params: Vec<f64> = posterior.mu.iter().chain(&posterior.rho).copied().collect();
            let grads: Vec<f64> = g.mu.iter().chain(&g.rho).copied().collect();
            let (state, updated) = adam_step(&adam, &params, &grads, &config.adam, lr)?;
            adam = state;
            posterior.mu.copy_from_slice(&updated[..p]);
            posterior.rho.copy_from_slice(&updated[p..]);
            elbo_sum += g.value;
            history.steps.push(StepRecord {
                step,
                epoch,
                elbo: g.value,
                ell: g.diagnostics.ell,
                fkl: g.diagnostics.fkl,
                argmax_index: g.diagnostics.argmax_index,
                grad_norm: g.norm(),
            });
        }
        let val_log_likelihood = match val_data {
            Some(val) if !val.is_empty() => {
                let mut vrng = crate::seeded_rng(config.seed ^ 0x5eed_0000_0000_0000 ^ epoch as u64);
                let pred = posterior_predictive(
                    &posterior,
                    spec,
                    val.x.view(),
                    &config.likelihood,
                    config.validation_samples,
                    &mut vrng,
                )?;
                let ll = predictive_log_likelihood(&pred, val)?;
                if best.as_ref().map_or(true, |b| ll > b.val_log_likelihood) {
                    best =
                        Some(BestCheckpoint { posterior: posterior.clone(), epoch, val_log_likelihood: ll });
                }
                Some(ll)
            }
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_elbo: elbo_sum / per_epoch as f64,
            val_log_likelihood,
        });
    }
    Ok(TrainOutcome { posterior, best, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{ContextSource, Interval};
    use crate::data::{synthetic_1d, SyntheticKind};
    use crate::network::Activation;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let s = AdamState { m: vec![0.5, -0.2], v: vec![0.1, 0.3], step: 3 };
        let (next, p) = adam_step(&s, &[1.0, 2.0], &[0.0, 0.0], &AdamConfig::default(), 0.1).unwrap();
        assert_abs_diff_eq!(next.m[0], 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(next.v[1], 0.297, epsilon = 1e-15);
        assert_eq!(next.step, 4);
        // moments are nonzero, so parameters still move; with zero moments they do not
        let (_, q) =
            adam_step(&AdamState::new(2), &[1.0, 2.0], &[0.0, 0.0], &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
        assert_ne!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn first_step_hand_unrolled() {
        let h = AdamConfig::default();
        let g = 0.3;
        let (_, p) = adam_step(&AdamState::new(1), &[1.0], &[g], &h, 0.01).unwrap();
        // m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
        let expect = 1.0 - 0.01 * g / (g.abs() + 1e-8);
        assert_abs_diff_eq!(p[0], expect, epsilon = 1e-15);
        assert!(adam_step(&AdamState::new(2), &[1.0], &[g], &h, 0.01).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.rate(1.0, 0, 10), 1.0);
        assert_abs_diff_eq!(LrSchedule::Cosine.rate(1.0, 10, 10), 0.0, epsilon = 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.3, 7, 10), 0.3);
    }

    fn setup() -> (MlpSpec, Dataset, TrainConfig) {
        let spec = MlpSpec::with_activation(vec![1, 10, 1], Activation::Tanh).unwrap();
        let data = synthetic_1d(SyntheticKind::GapSine, 40, 0.1, &mut crate::seeded_rng(0)).unwrap();
        let ctx = ContextConfig {
            source: ContextSource::UniformBox { bounds: vec![Interval { lo: -6.0, hi: 6.0 }] },
            sets: 2,
            points: 8,
            minibatch_mix: 0.5,
        };
        let mut cfg = TrainConfig::new(
            ctx,
            Likelihood::GaussianRegression { noise_variance: 0.01 },
            PriorSpec::isotropic(1.0).unwrap(),
        );
        cfg.epochs = 5;
        cfg.batch_size = 20;
        cfg.learning_rate = 1e-2;
        (spec, data, cfg)
    }

    #[test]
    fn zero_epochs_return_the_initial_posterior() {
        let (spec, data, mut cfg) = setup();
        cfg.epochs = 0;
        let out = train(&spec, &data, None, &cfg).unwrap();
        let init = init_posterior(&spec, &cfg, &mut crate::seeded_rng(cfg.seed));
        assert_eq!(out.posterior, init);
        assert!(out.history.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (spec, data, cfg) = setup();
        let a = train(&spec, &data, Some(&data), &cfg).unwrap();
        let b = train(&spec, &data, Some(&data), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.history.steps.len(), 10);
        assert!(a.history.steps.iter().all(|r| r.fkl >= -1e-8));
        assert!(a.best.is_some());
        // validation does not perturb the trajectory
        let c = train(&spec, &data, None, &cfg).unwrap();
        assert_eq!(a.posterior, c.posterior);
    }
}
