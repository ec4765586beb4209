//! The function-space variational objective and its gradients.
//!
//! For a context set `X_C`, both the variational distribution and the prior are pushed
//! through the network linearized at a designated point and compared with a Gaussian KL.
//! The regularizer of one step is the largest such KL over the sampled context sets, and
//! the ELBO is the reparameterized expected log-likelihood minus that value.
//!
//! With the α/β partition the pushforward covariances are block-diagonal over outputs (the
//! final-layer weights of different outputs are disjoint and independent), so the KL is
//! evaluated one output block at a time.
//!
//! Gradients are analytic. Writing `Gq = ∂KL/∂Σq`, `Gp = ∂KL/∂Σp` and `a = Σp⁻¹(μq − μp)`,
//! a variance `s_k` entering a covariance as `s_k c_k c_kᵀ` receives `c_kᵀ Gq c_k`, and the
//! mean gradient is pulled back through whichever Jacobian produced the mean difference.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::context::ContextBatch;
use crate::error::{dim_mismatch, FsviError, Result};
use crate::gaussian::{block_gaussian_kl, DiagonalGaussian, JitterSchedule};
use crate::linearization::{beta_covariance_blocks, LinearizationConfig, LinearizationMode};
use crate::network::MlpSpec;
use crate::par;

/// Initial posterior standard deviation.
pub const DEFAULT_INIT_SIGMA: f64 = 1e-3;

/// Largest parameter count for which exact second-order gradients are allowed.
pub const EXACT_POLICY_MAX_PARAMS: usize = 2000;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean-field Gaussian `q = N(μ, diag(softplus(ρ)²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(dim_mismatch("rho length", mu.len(), rho.len()));
        }
        Ok(Self { mu, rho })
    }

    /// Posterior with the given mean and a common standard deviation.
    pub fn with_sigma(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(FsviError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        let rho = vec![inverse_softplus(sigma); mu.len()];
        Ok(Self { mu, rho })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r).powi(2)).collect()
    }

    pub fn distribution(&self) -> DiagonalGaussian {
        DiagonalGaussian::new(self.mu.clone(), self.variance()).expect("softplus variances are positive")
    }

    /// `μ + σ ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu.iter().zip(&self.rho).zip(eps).map(|((m, r), e)| m + softplus(*r) * e).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMean {
    Zero,
    Vector(Vec<f64>),
}

/// Where the prior pushforward is linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizationPoint {
    /// At the prior mean, with its own α draw.
    PriorMean,
    /// At the variational parameters `Θ̂`, sharing the α draw of `q`.
    SharedVariationalMean,
}

/// Isotropic Gaussian prior `N(m_p, σ_p² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: PriorMean,
    pub variance: f64,
    pub linearization_point: LinearizationPoint,
}

impl PriorSpec {
    /// Zero-mean prior linearized at the shared variational mean.
    pub fn isotropic(variance: f64) -> Result<Self> {
        let p = Self {
            mean: PriorMean::Zero,
            variance,
            linearization_point: LinearizationPoint::SharedVariationalMean,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(FsviError::InvalidParameter(format!(
                "prior variance must be positive, got {}",
                self.variance
            )));
        }
        Ok(())
    }

    pub fn mean_vector(&self, p: usize) -> Result<Vec<f64>> {
        match &self.mean {
            PriorMean::Zero => Ok(vec![0.0; p]),
            PriorMean::Vector(v) if v.len() == p => Ok(v.clone()),
            PriorMean::Vector(v) => Err(dim_mismatch("prior mean length", p, v.len())),
        }
    }

    pub fn distribution(&self, p: usize) -> Result<DiagonalGaussian> {
        DiagonalGaussian::isotropic(self.mean_vector(p)?, self.variance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    GaussianRegression { noise_variance: f64 },
    CategoricalSoftmax,
}

/// Regression targets (N×Q) or class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Real(Array2<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.nrows(),
            Targets::Class(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(y) => Targets::Real(y.select(Axis(0), idx)),
            Targets::Class(c) => Targets::Class(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

pub(crate) fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

impl Likelihood {
    pub fn validate(&self) -> Result<()> {
        if let Likelihood::GaussianRegression { noise_variance } = self {
            if !(*noise_variance > 0.0 && noise_variance.is_finite()) {
                return Err(FsviError::InvalidParameter(format!(
                    "noise variance must be positive, got {noise_variance}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_targets(&self, outputs: usize, q_dim: usize, targets: &Targets) -> Result<()> {
        if targets.len() != outputs {
            return Err(dim_mismatch("target rows", outputs, targets.len()));
        }
        match (self, targets) {
            (Likelihood::GaussianRegression { .. }, Targets::Real(y)) => {
                if y.ncols() != q_dim {
                    return Err(dim_mismatch("target columns", q_dim, y.ncols()));
                }
                Ok(())
            }
            (Likelihood::CategoricalSoftmax, Targets::Class(c)) => {
                if let Some(bad) = c.iter().find(|&&l| l >= q_dim) {
                    return Err(FsviError::InvalidParameter(format!(
                        "class label {bad} out of range for {q_dim} outputs"
                    )));
                }
                Ok(())
            }
            _ => Err(FsviError::InvalidParameter("target kind does not match the likelihood".into())),
        }
    }

    /// `Σ_i log p(y_i | f_i)`.
    pub fn log_likelihood(&self, outputs: ArrayView2<f64>, targets: &Targets) -> f64 {
        match (self, targets) {
            (Likelihood::GaussianRegression { noise_variance }, Targets::Real(y)) => {
                let c = -0.5 * (2.0 * std::f64::consts::PI * noise_variance).ln();
                outputs
                    .iter()
                    .zip(y.iter())
                    .map(|(f, t)| c - (t - f) * (t - f) / (2.0 * noise_variance))
                    .sum()
            }
            (Likelihood::CategoricalSoftmax, Targets::Class(c)) => {
                outputs.rows().into_iter().zip(c).map(|(row, &label)| log_softmax_row(row)[label]).sum()
            }
            _ => unreachable!("targets are checked before evaluation"),
        }
    }

    /// `∂/∂f Σ_i log p(y_i | f_i)`, same shape as `outputs`.
    pub fn log_likelihood_grad(&self, outputs: ArrayView2<f64>, targets: &Targets) -> Array2<f64> {
        match (self, targets) {
            (Likelihood::GaussianRegression { noise_variance }, Targets::Real(y)) => {
                (y - &outputs) / *noise_variance
            }
            (Likelihood::CategoricalSoftmax, Targets::Class(c)) => {
                let mut g = Array2::<f64>::zeros(outputs.raw_dim());
                for (i, (row, &label)) in outputs.rows().into_iter().zip(c).enumerate() {
                    let p = log_softmax_row(row).mapv(f64::exp);
                    for q in 0..p.len() {
                        g[[i, q]] = -p[q];
                    }
                    g[[i, label]] += 1.0;
                }
                g
            }
            _ => unreachable!("targets are checked before evaluation"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradPolicy {
    /// Jacobians and hidden features are treated as constants.
    StopGradJacobian,
    /// Differentiates through the Jacobians as well; limited to small nets.
    ExactSmallNet,
}

/// Settings shared by [`elbo`] and [`elbo_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Likelihood draws `M`.
    pub mc_samples: usize,
    pub kl_scale: f64,
    /// Multiplier on the batch log-likelihood, `N / B` for minibatches of a size-`N` set.
    pub ell_scale: f64,
    pub linearization: LinearizationConfig,
    pub jitter: JitterSchedule,
    pub grad_policy: GradPolicy,
}

impl ObjectiveConfig {
    pub fn new(spec: &MlpSpec) -> Self {
        Self {
            mc_samples: 5,
            kl_scale: 1.0,
            ell_scale: 1.0,
            linearization: LinearizationConfig::mc(spec),
            jitter: JitterSchedule::default(),
            grad_policy: GradPolicy::StopGradJacobian,
        }
    }

    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(FsviError::InvalidParameter("M must be at least 1".into()));
        }
        if !(self.kl_scale >= 0.0 && self.kl_scale.is_finite()) {
            return Err(FsviError::InvalidParameter(format!("kl_scale {} must be >= 0", self.kl_scale)));
        }
        if !(self.ell_scale > 0.0 && self.ell_scale.is_finite()) {
            return Err(FsviError::InvalidParameter(format!("ell_scale {} must be > 0", self.ell_scale)));
        }
        self.linearization.validate(spec)?;
        if self.grad_policy == GradPolicy::ExactSmallNet {
            if spec.num_params() > EXACT_POLICY_MAX_PARAMS {
                return Err(FsviError::PolicyViolation(format!(
                    "exact_small_net needs at most {EXACT_POLICY_MAX_PARAMS} parameters, the net has {}",
                    spec.num_params()
                )));
            }
            if self.linearization.mode == LinearizationMode::Exact {
                return Err(FsviError::PolicyViolation(
                    "exact_small_net is defined for the α/β estimator only".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A minibatch of inputs and targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a Targets,
}

/// Standard-normal draws for the prior-mean policy: one pair of α perturbations (for `q`
/// and for `p`) per linearization sample.
#[derive(Debug, Clone)]
struct SetNoise {
    draws: Vec<(Vec<f64>, Vec<f64>)>,
}

fn draw_set_noise<R: Rng + ?Sized>(
    spec: &MlpSpec,
    prior: &PriorSpec,
    lin: &LinearizationConfig,
    rng: &mut R,
) -> SetNoise {
    let draws = if lin.mode == LinearizationMode::McPartition
        && prior.linearization_point == LinearizationPoint::PriorMean
    {
        let n_alpha = lin.partition.alpha().len();
        let mut draw = || -> Vec<f64> { (0..n_alpha).map(|_| rng.sample(StandardNormal)).collect() };
        (0..lin.samples).map(|_| (draw(), draw())).collect()
    } else {
        Vec::new()
    };
    debug_assert!(spec.num_params() >= lin.partition.alpha().len());
    SetNoise { draws }
}

/// Gradients of one context set's KL with respect to `μ` and `σ`.
struct SetGrad {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

fn embed_alpha(values: &[f64], scale: &[f64], p: usize) -> Vec<f64> {
    let mut d = vec![0.0; p];
    for (k, (e, s)) in values.iter().zip(scale).enumerate() {
        d[k] = e * s;
    }
    d
}

/// Output block `q` of a flattened N·Q vector.
fn output_block(flat: ArrayView2<f64>, q: usize) -> Array1<f64> {
    flat.column(q).to_owned()
}

/// KL (and optionally its gradient) for one context set.
#[allow(clippy::too_many_arguments)]
fn set_kl(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    x: ArrayView2<f64>,
    lin: &LinearizationConfig,
    jitter: &JitterSchedule,
    noise: &SetNoise,
    policy: Option<GradPolicy>,
) -> Result<(f64, Option<SetGrad>)> {
    if x.nrows() == 0 {
        return Err(FsviError::EmptyInput("context set has no points".into()));
    }
    match lin.mode {
        LinearizationMode::McPartition => set_kl_partition(q, prior, spec, x, lin, jitter, noise, policy),
        LinearizationMode::Exact => set_kl_exact(q, prior, spec, x, jitter, policy),
    }
}

#[allow(clippy::too_many_arguments)]
fn set_kl_partition(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    x: ArrayView2<f64>,
    lin: &LinearizationConfig,
    jitter: &JitterSchedule,
    noise: &SetNoise,
    policy: Option<GradPolicy>,
) -> Result<(f64, Option<SetGrad>)> {
    let p_len = spec.num_params();
    let q_dim = spec.output_dim();
    let h_dim = spec.feature_dim();
    let beta = lin.partition.beta();
    let alpha_len = lin.partition.alpha().len();
    let m_p = prior.mean_vector(p_len)?;
    let sigma = q.sigma();
    let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let s_beta = &var[beta.clone()];
    let prior_beta = vec![prior.variance; beta.len()];
    let want_grad = policy.is_some();
    let exact = policy == Some(GradPolicy::ExactSmallNet);

    let (out_mu, h_mu) = spec.forward_with_features(&q.mu, x)?;
    let cov_q = beta_covariance_blocks(h_mu.view(), s_beta, q_dim)?;

    match prior.linearization_point {
        LinearizationPoint::SharedVariationalMean => {
            // α offsets and f(X; μ) cancel; μq − μp = J_β (μ_β − m_β).
            let delta_beta: Vec<f64> = beta.clone().map(|k| q.mu[k] - m_p[k]).collect();
            let diff: Vec<Array1<f64>> = (0..q_dim)
                .map(|qq| {
                    let w = Array1::from(delta_beta[qq * h_dim..(qq + 1) * h_dim].to_vec());
                    h_mu.dot(&w) + delta_beta[q_dim * h_dim + qq]
                })
                .collect();
            let cov_p = beta_covariance_blocks(h_mu.view(), &prior_beta, q_dim)?;
            let (kl, g) = block_gaussian_kl(&diff, &cov_q, &cov_p, jitter, want_grad)?;
            let Some(g) = g else { return Ok((kl, None)) };
            let mut g_mu = vec![0.0; p_len];
            let mut g_sigma = vec![0.0; p_len];
            let ones = Array1::<f64>::ones(x.nrows());
            for qq in 0..q_dim {
                let hg = h_mu.t().dot(&g.mean_q[qq]);
                let gh = g.cov_q[qq].dot(&h_mu);
                for j in 0..h_dim {
                    let k = beta.start + qq * h_dim + j;
                    g_mu[k] = hg[j];
                    let dvar = h_mu.column(j).dot(&gh.column(j));
                    g_sigma[k] = 2.0 * sigma[k] * dvar;
                }
                let kb = beta.start + q_dim * h_dim + qq;
                g_mu[kb] = g.mean_q[qq].sum();
                let dvar = ones.dot(&g.cov_q[qq].dot(&ones));
                g_sigma[kb] = 2.0 * sigma[kb] * dvar;
            }
            if exact {
                let mut d_h = Array2::<f64>::zeros(h_mu.raw_dim());
                for qq in 0..q_dim {
                    let sw = &s_beta[qq * h_dim..(qq + 1) * h_dim];
                    let mut h_scaled = h_mu.clone();
                    for mut row in h_scaled.rows_mut() {
                        for (v, s) in row.iter_mut().zip(sw) {
                            *v *= s;
                        }
                    }
                    d_h += &(2.0 * g.cov_q[qq].dot(&h_scaled));
                    d_h += &(2.0 * prior.variance * g.cov_p[qq].dot(&h_mu));
                    let dw = &delta_beta[qq * h_dim..(qq + 1) * h_dim];
                    for i in 0..x.nrows() {
                        for j in 0..h_dim {
                            d_h[[i, j]] += g.mean_q[qq][i] * dw[j];
                        }
                    }
                }
                let back = spec.features_vjp(&q.mu, x, d_h.view())?;
                for (a, b) in g_mu.iter_mut().zip(back) {
                    *a += b;
                }
            }
            Ok((kl, Some(SetGrad { mu: g_mu, sigma: g_sigma })))
        }
        LinearizationPoint::PriorMean => {
            let (out_m, h_m) = spec.forward_with_features(&m_p, x)?;
            let cov_p = beta_covariance_blocks(h_m.view(), &prior_beta, q_dim)?;
            let prior_sigma = vec![prior.variance.sqrt(); alpha_len];
            let r = noise.draws.len() as f64;
            let mut total = 0.0;
            let mut g_mu = vec![0.0; p_len];
            let mut g_sigma = vec![0.0; p_len];
            for (eq, ep) in &noise.draws {
                let dq = embed_alpha(eq, &sigma[..alpha_len], p_len);
                let dp = embed_alpha(ep, &prior_sigma, p_len);
                let mean_q = &out_mu + &spec.jvp(&q.mu, x, &dq)?;
                let mean_p = &out_m + &spec.jvp(&m_p, x, &dp)?;
                let d = &mean_q - &mean_p;
                let diff: Vec<Array1<f64>> = (0..q_dim).map(|qq| output_block(d.view(), qq)).collect();
                let (kl, g) = block_gaussian_kl(&diff, &cov_q, &cov_p, jitter, want_grad)?;
                total += kl / r;
                let Some(g) = g else { continue };
                let mut cot = Array2::<f64>::zeros((x.nrows(), q_dim));
                for qq in 0..q_dim {
                    cot.column_mut(qq).assign(&g.mean_q[qq]);
                }
                // through f(X; μ) and the α offset's dependence on σ_α
                let (second, jt_cot) = if exact {
                    let (gp, gd) = spec.jvp_vjp(&q.mu, x, &dq, cot.view())?;
                    (Some(gp), gd)
                } else {
                    (None, Vec::new())
                };
                let jt_cot = if exact { jt_cot } else { spec.vjp(&q.mu, x, cot.view())? };
                for k in 0..p_len {
                    g_mu[k] += jt_cot[k] / r;
                }
                for k in 0..alpha_len {
                    g_sigma[k] += jt_cot[k] * eq[k] / r;
                }
                if let Some(gp) = second {
                    for k in 0..p_len {
                        g_mu[k] += gp[k] / r;
                    }
                }
                let ones = Array1::<f64>::ones(x.nrows());
                for qq in 0..q_dim {
                    let gh = g.cov_q[qq].dot(&h_mu);
                    for j in 0..h_dim {
                        let k = beta.start + qq * h_dim + j;
                        g_sigma[k] += 2.0 * sigma[k] * h_mu.column(j).dot(&gh.column(j)) / r;
                    }
                    let kb = beta.start + q_dim * h_dim + qq;
                    g_sigma[kb] += 2.0 * sigma[kb] * ones.dot(&g.cov_q[qq].dot(&ones)) / r;
                }
                if exact {
                    let mut d_h = Array2::<f64>::zeros(h_mu.raw_dim());
                    for qq in 0..q_dim {
                        let sw = &s_beta[qq * h_dim..(qq + 1) * h_dim];
                        let mut h_scaled = h_mu.clone();
                        for mut row in h_scaled.rows_mut() {
                            for (v, s) in row.iter_mut().zip(sw) {
                                *v *= s;
                            }
                        }
                        d_h += &(2.0 * g.cov_q[qq].dot(&h_scaled));
                    }
                    let back = spec.features_vjp(&q.mu, x, d_h.view())?;
                    for (a, b) in g_mu.iter_mut().zip(back) {
                        *a += b / r;
                    }
                }
            }
            let total = crate::gaussian::clamp_kl(total)?;
            Ok((total, want_grad.then_some(SetGrad { mu: g_mu, sigma: g_sigma })))
        }
    }
}

fn set_kl_exact(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    x: ArrayView2<f64>,
    jitter: &JitterSchedule,
    policy: Option<GradPolicy>,
) -> Result<(f64, Option<SetGrad>)> {
    let p_len = spec.num_params();
    let m_p = prior.mean_vector(p_len)?;
    let sigma = q.sigma();
    let jac = spec.param_jacobian(&q.mu, x)?;
    let scaled_cov = |j: &Array2<f64>, s: &dyn Fn(usize) -> f64| {
        let mut js = j.clone();
        for mut row in js.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v *= s(k);
            }
        }
        let mut c = js.dot(&j.t());
        crate::gaussian::symmetrize(&mut c);
        c
    };
    let cov_q = scaled_cov(&jac, &|k| sigma[k] * sigma[k]);
    let (cov_p, diff) = match prior.linearization_point {
        LinearizationPoint::SharedVariationalMean => {
            let delta = Array1::from_iter(q.mu.iter().zip(&m_p).map(|(a, b)| a - b));
            (scaled_cov(&jac, &|_| prior.variance), jac.dot(&delta))
        }
        LinearizationPoint::PriorMean => {
            let jm = spec.param_jacobian(&m_p, x)?;
            let fq = spec.forward(&q.mu, x)?;
            let fp = spec.forward(&m_p, x)?;
            let d = (&fq - &fp).into_shape_with_order(jac.nrows()).unwrap();
            (scaled_cov(&jm, &|_| prior.variance), d)
        }
    };
    let (kl, g) = block_gaussian_kl(&[diff], &[cov_q], &[cov_p], jitter, policy.is_some())?;
    let Some(g) = g else { return Ok((kl, None)) };
    let g_mu = jac.t().dot(&g.mean_q[0]).to_vec();
    let gj = g.cov_q[0].dot(&jac);
    let g_sigma = (0..p_len).map(|k| 2.0 * sigma[k] * jac.column(k).dot(&gj.column(k))).collect();
    Ok((kl, Some(SetGrad { mu: g_mu, sigma: g_sigma })))
}

fn check_objective_inputs(q: &VariationalPosterior, prior: &PriorSpec, spec: &MlpSpec) -> Result<()> {
    if q.len() != spec.num_params() {
        return Err(dim_mismatch("posterior length", spec.num_params(), q.len()));
    }
    prior.validate()
}

/// `KL(q̃ ‖ p̃)` at the evaluation points `x`.
///
/// Under the shared linearization point the α offsets of the two pushforwards cancel, so
/// no randomness is drawn. Under the prior-mean point each of the `R` linearization samples
/// draws one α perturbation for `q` and one for `p`, and the KLs are averaged.
pub fn function_space_kl<R: Rng + ?Sized>(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    x: ArrayView2<f64>,
    lin: &LinearizationConfig,
    jitter: &JitterSchedule,
    rng: &mut R,
) -> Result<f64> {
    check_objective_inputs(q, prior, spec)?;
    lin.validate(spec)?;
    let noise = draw_set_noise(spec, prior, lin, rng);
    Ok(set_kl(q, prior, spec, x, lin, jitter, &noise, None)?.0)
}

/// Largest KL over the context sets and its index, ties going to the lowest index.
pub fn supremum_estimate<R: Rng + ?Sized>(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    contexts: &ContextBatch,
    lin: &LinearizationConfig,
    jitter: &JitterSchedule,
    rng: &mut R,
) -> Result<(f64, usize)> {
    check_objective_inputs(q, prior, spec)?;
    lin.validate(spec)?;
    let noises: Vec<SetNoise> = (0..contexts.len()).map(|_| draw_set_noise(spec, prior, lin, rng)).collect();
    let kls = context_kls(q, prior, spec, contexts, lin, jitter, &noises, None)?;
    let (value, idx) = argmax(kls.iter().map(|(v, _)| *v));
    Ok((value, idx))
}

fn argmax(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn context_kls(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    contexts: &ContextBatch,
    lin: &LinearizationConfig,
    jitter: &JitterSchedule,
    noises: &[SetNoise],
    policy: Option<GradPolicy>,
) -> Result<Vec<(f64, Option<SetGrad>)>> {
    if contexts.dim() != spec.input_dim() {
        return Err(dim_mismatch("context columns", spec.input_dim(), contexts.dim()));
    }
    par::map_indexed(contexts.len(), |s| {
        set_kl(q, prior, spec, contexts.sets()[s].view(), lin, jitter, &noises[s], policy)
            .map_err(|e| FsviError::ContextSet { set: s, source: Box::new(e) })
    })
    .into_iter()
    .collect()
}

fn draw_likelihood_noise<R: Rng + ?Sized>(p: usize, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn check_batch(spec: &MlpSpec, batch: &Batch<'_>, likelihood: &Likelihood) -> Result<()> {
    if batch.x.nrows() == 0 {
        return Err(FsviError::EmptyInput("batch has no rows".into()));
    }
    if batch.x.ncols() != spec.input_dim() {
        return Err(dim_mismatch("batch columns", spec.input_dim(), batch.x.ncols()));
    }
    likelihood.validate()?;
    likelihood.check_targets(batch.x.nrows(), spec.output_dim(), batch.y)
}

fn ell_from_noise(
    q: &VariationalPosterior,
    spec: &MlpSpec,
    batch: &Batch<'_>,
    likelihood: &Likelihood,
    noise: &[Vec<f64>],
) -> Result<Vec<f64>> {
    par::map_slice(noise, |eps| {
        let theta = q.reparameterize(eps);
        let out = spec.forward(&theta, batch.x)?;
        Ok(likelihood.log_likelihood(out.view(), batch.y))
    })
    .into_iter()
    .collect()
}

/// `(1/M) Σ_j log p(y_B | f(X_B; μ + σ ⊙ ε_j))`, summed over the batch.
pub fn expected_log_likelihood<R: Rng + ?Sized>(
    q: &VariationalPosterior,
    spec: &MlpSpec,
    batch: Batch<'_>,
    likelihood: &Likelihood,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    if q.len() != spec.num_params() {
        return Err(dim_mismatch("posterior length", spec.num_params(), q.len()));
    }
    if m == 0 {
        return Err(FsviError::InvalidParameter("M must be at least 1".into()));
    }
    check_batch(spec, &batch, likelihood)?;
    let noise = draw_likelihood_noise(q.len(), m, rng);
    let per = ell_from_noise(q, spec, &batch, likelihood, &noise)?;
    Ok(per.iter().sum::<f64>() / m as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboDiagnostics {
    /// Scaled expected log-likelihood.
    pub ell: f64,
    /// Supremum of the function-space KL over the context sets.
    pub fkl: f64,
    pub argmax_index: usize,
    pub set_kls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    /// `∂(−elbo)/∂μ`.
    pub mu: Vec<f64>,
    /// `∂(−elbo)/∂ρ`.
    pub rho: Vec<f64>,
    pub value: f64,
    pub diagnostics: ElboDiagnostics,
}

impl ElboGradient {
    pub fn norm(&self) -> f64 {
        self.mu.iter().chain(&self.rho).map(|g| g * g).sum::<f64>().sqrt()
    }
}

struct ObjectiveNoise {
    likelihood: Vec<Vec<f64>>,
    sets: Vec<SetNoise>,
}

/// All randomness of one objective evaluation, drawn in a fixed order: the `M` likelihood
/// draws first, then the per-set linearization draws.
fn draw_objective_noise<R: Rng + ?Sized>(
    spec: &MlpSpec,
    prior: &PriorSpec,
    contexts: &ContextBatch,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> ObjectiveNoise {
    let likelihood = draw_likelihood_noise(spec.num_params(), config.mc_samples, rng);
    let sets = (0..contexts.len()).map(|_| draw_set_noise(spec, prior, &config.linearization, rng)).collect();
    ObjectiveNoise { likelihood, sets }
}

#[allow(clippy::too_many_arguments)]
fn validate_all(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    batch: &Batch<'_>,
    likelihood: &Likelihood,
    config: &ObjectiveConfig,
) -> Result<()> {
    check_objective_inputs(q, prior, spec)?;
    config.validate(spec)?;
    check_batch(spec, batch, likelihood)
}

/// `ell_scale · ELL − kl_scale · Ĝ` and its two terms.
#[allow(clippy::too_many_arguments)]
pub fn elbo<R: Rng + ?Sized>(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    batch: Batch<'_>,
    contexts: &ContextBatch,
    likelihood: &Likelihood,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(f64, ElboDiagnostics)> {
    validate_all(q, prior, spec, &batch, likelihood, config)?;
    let noise = draw_objective_noise(spec, prior, contexts, config, rng);
    let per = ell_from_noise(q, spec, &batch, likelihood, &noise.likelihood)?;
    let ell = config.ell_scale * per.iter().sum::<f64>() / config.mc_samples as f64;
    let kls =
        context_kls(q, prior, spec, contexts, &config.linearization, &config.jitter, &noise.sets, None)?;
    let set_kls: Vec<f64> = kls.iter().map(|(v, _)| *v).collect();
    let (fkl, argmax_index) = argmax(set_kls.iter().copied());
    let value = ell - config.kl_scale * fkl;
    Ok((value, ElboDiagnostics { ell, fkl, argmax_index, set_kls }))
}

/// Gradient of `−elbo` with respect to `(μ, ρ)`, using the same draws as [`elbo`] would for
/// the same generator state.
///
/// The supremum is differentiated through its (lowest-index) maximizing set.
#[allow(clippy::too_many_arguments)]
pub fn elbo_grad<R: Rng + ?Sized>(
    q: &VariationalPosterior,
    prior: &PriorSpec,
    spec: &MlpSpec,
    batch: Batch<'_>,
    contexts: &ContextBatch,
    likelihood: &Likelihood,
    config: &ObjectiveConfig,
    rng: &mut R,
) -> Result<ElboGradient> {
    validate_all(q, prior, spec, &batch, likelihood, config)?;
    let noise = draw_objective_noise(spec, prior, contexts, config, rng);
    let p_len = spec.num_params();
    let m = config.mc_samples as f64;

    let ll_parts: Vec<(f64, Vec<f64>)> = par::map_slice(&noise.likelihood, |eps| {
        let theta = q.reparameterize(eps);
        let out = spec.forward(&theta, batch.x)?;
        let ll = likelihood.log_likelihood(out.view(), batch.y);
        let cot = likelihood.log_likelihood_grad(out.view(), batch.y);
        Ok((ll, spec.vjp(&theta, batch.x, cot.view())?))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let sigmoid_rho: Vec<f64> = q.rho.iter().map(|&r| sigmoid(r)).collect();
    let mut g_mu = vec![0.0; p_len];
    let mut g_rho = vec![0.0; p_len];
    let mut ell = 0.0;
    let scale = config.ell_scale / m;
    for ((ll, g), eps) in ll_parts.iter().zip(&noise.likelihood) {
        ell += ll;
        for k in 0..p_len {
            g_mu[k] -= scale * g[k];
            g_rho[k] -= scale * g[k] * eps[k] * sigmoid_rho[k];
        }
    }
    let ell = config.ell_scale * ell / m;

    let want = (config.kl_scale > 0.0).then_some(config.grad_policy);
    let kls =
        context_kls(q, prior, spec, contexts, &config.linearization, &config.jitter, &noise.sets, want)?;
    let set_kls: Vec<f64> = kls.iter().map(|(v, _)| *v).collect();
    let (fkl, argmax_index) = argmax(set_kls.iter().copied());
    if let Some((_, Some(sg))) = kls.into_iter().nth(argmax_index) {
        for k in 0..p_len {
            g_mu[k] += config.kl_scale * sg.mu[k];
            g_rho[k] += config.kl_scale * sg.sigma[k] * sigmoid_rho[k];
        }
    }
    let value = ell - config.kl_scale * fkl;
    Ok(ElboGradient {
        mu: g_mu,
        rho: g_rho,
        value,
        diagnostics: ElboDiagnostics { ell, fkl, argmax_index, set_kls },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{diag_gaussian_kl, gaussian_kl, FunctionGaussian};
    use crate::network::{init_params, Activation, InitScheme};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn softplus_round_trip() {
        for s in [1e-6, 1e-3, 0.5, 1.0, 20.0] {
            assert_abs_diff_eq!(softplus(inverse_softplus(s)), s, epsilon = 1e-12 * s.max(1.0));
        }
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5);
    }

    fn small_net() -> MlpSpec {
        MlpSpec::with_activation(vec![1, 4, 1], Activation::Tanh).unwrap()
    }

    #[test]
    fn prior_matching_posterior_has_zero_kl() {
        let spec = small_net();
        let prior = PriorSpec::isotropic(0.7).unwrap();
        let q = VariationalPosterior::with_sigma(vec![0.0; spec.num_params()], 0.7f64.sqrt()).unwrap();
        let x = array![[0.1], [0.5], [-2.0]];
        let lin = LinearizationConfig::mc(&spec);
        let kl = function_space_kl(
            &q,
            &prior,
            &spec,
            x.view(),
            &lin,
            &JitterSchedule::default(),
            &mut crate::seeded_rng(0),
        )
        .unwrap();
        assert!(kl.abs() <= 1e-8, "{kl}");
    }

    #[test]
    fn one_point_linear_net_matches_scalar_formula() {
        // f(x) = w x + b, both in β
        let spec = MlpSpec::new(vec![1, 1], vec![]).unwrap();
        let q =
            VariationalPosterior::new(vec![0.8, -0.2], vec![inverse_softplus(0.5), inverse_softplus(0.3)])
                .unwrap();
        let prior = PriorSpec::isotropic(2.0).unwrap();
        let x: f64 = 1.5;
        let mq = 0.8 * x - 0.2;
        let vq = 0.25 * x * x + 0.09;
        let vp = 2.0 * (x * x + 1.0);
        let expect = 0.5 * (vq / vp + mq * mq / vp - 1.0 + (vp / vq).ln());
        let lin = LinearizationConfig::mc(&spec);
        let kl = function_space_kl(
            &q,
            &prior,
            &spec,
            array![[x]].view(),
            &lin,
            &JitterSchedule::default(),
            &mut crate::seeded_rng(0),
        )
        .unwrap();
        assert_abs_diff_eq!(kl, expect, epsilon = 1e-12);
    }

    #[test]
    fn function_kl_below_parameter_kl() {
        let spec = small_net();
        let mut rng = crate::seeded_rng(2);
        let mu = init_params(&spec, &mut rng, InitScheme::UniformFanIn).to_vec();
        let q = VariationalPosterior::with_sigma(mu, 0.2).unwrap();
        let prior = PriorSpec::isotropic(1.0).unwrap();
        let lin = LinearizationConfig::mc(&spec);
        let x = array![[0.3], [1.0]];
        let kl = function_space_kl(&q, &prior, &spec, x.view(), &lin, &JitterSchedule::default(), &mut rng)
            .unwrap();
        let param =
            diag_gaussian_kl(&q.distribution(), &prior.distribution(spec.num_params()).unwrap()).unwrap();
        assert!(kl <= param + 1e-6);
    }

    #[test]
    fn exact_mode_matches_direct_pushforward_kl() {
        let spec = MlpSpec::with_activation(vec![2, 3, 2], Activation::Tanh).unwrap();
        let mut rng = crate::seeded_rng(7);
        let mu = init_params(&spec, &mut rng, InitScheme::UniformFanIn).to_vec();
        let q = VariationalPosterior::with_sigma(mu.clone(), 0.3).unwrap();
        let prior = PriorSpec::isotropic(1.5).unwrap();
        let mut lin = LinearizationConfig::mc(&spec);
        lin.mode = LinearizationMode::Exact;
        let x = array![[0.3, 0.1], [-1.0, 0.2]];
        let jitter = JitterSchedule::default();
        let kl = function_space_kl(&q, &prior, &spec, x.view(), &lin, &jitter, &mut rng).unwrap();
        // shared point: p is the prior variance pushed through J(μ), mean shifted by J(m_p − μ)
        let qf = crate::linearization::push_forward_exact(&q.distribution(), &spec, x.view()).unwrap();
        let pd = DiagonalGaussian::isotropic(mu.clone(), 1.5).unwrap();
        let mut pf = crate::linearization::push_forward_exact(&pd, &spec, x.view()).unwrap();
        let jac = spec.param_jacobian(&mu, x.view()).unwrap();
        pf.mean = &pf.mean - &jac.dot(&Array1::from(mu));
        let expect =
            gaussian_kl(&qf, &FunctionGaussian::new(pf.mean, pf.covariance).unwrap(), &jitter).unwrap();
        assert_abs_diff_eq!(kl, expect, epsilon = 1e-10);
    }

    #[test]
    fn supremum_takes_the_lowest_maximizer() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0].into_iter()), (3.0, 1));
        assert_eq!(argmax([0.0].into_iter()), (0.0, 0));
    }

    #[test]
    fn deterministic_limit_log_likelihood() {
        let spec = small_net();
        let mu = init_params(&spec, &mut crate::seeded_rng(1), InitScheme::UniformFanIn).to_vec();
        let q = VariationalPosterior::new(mu.clone(), vec![-60.0; spec.num_params()]).unwrap();
        let x = array![[0.4]];
        let y = Targets::Real(array![[0.9]]);
        let lik = Likelihood::GaussianRegression { noise_variance: 0.3 };
        let got = expected_log_likelihood(
            &q,
            &spec,
            Batch { x: x.view(), y: &y },
            &lik,
            4,
            &mut crate::seeded_rng(0),
        )
        .unwrap();
        let f = spec.forward(&mu, x.view()).unwrap()[[0, 0]];
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 0.3).ln() - (0.9 - f).powi(2) / 0.6;
        assert_abs_diff_eq!(got, expect, epsilon = 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_one_over_q() {
        let spec = MlpSpec::with_activation(vec![2, 3, 4], Activation::Relu).unwrap();
        let q =
            VariationalPosterior::new(vec![0.0; spec.num_params()], vec![-60.0; spec.num_params()]).unwrap();
        let x = array![[1.0, 2.0], [0.0, -1.0]];
        let y = Targets::Class(vec![0, 3]);
        let got = expected_log_likelihood(
            &q,
            &spec,
            Batch { x: x.view(), y: &y },
            &Likelihood::CategoricalSoftmax,
            3,
            &mut crate::seeded_rng(0),
        )
        .unwrap();
        assert_abs_diff_eq!(got, 2.0 * (0.25f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn target_checks() {
        let lik = Likelihood::CategoricalSoftmax;
        assert!(lik.check_targets(2, 2, &Targets::Class(vec![0, 2])).is_err());
        assert!(lik.check_targets(2, 2, &Targets::Real(Array2::zeros((2, 2)))).is_err());
        let reg = Likelihood::GaussianRegression { noise_variance: 1.0 };
        assert!(reg.check_targets(3, 1, &Targets::Real(Array2::zeros((2, 1)))).is_err());
        assert!(Likelihood::GaussianRegression { noise_variance: 0.0 }.validate().is_err());
    }

    #[test]
    fn exact_policy_rejects_large_nets() {
        let spec = MlpSpec::with_activation(vec![10, 200, 1], Activation::Tanh).unwrap();
        let mut cfg = ObjectiveConfig::new(&spec);
        cfg.grad_policy = GradPolicy::ExactSmallNet;
        assert!(matches!(cfg.validate(&spec), Err(FsviError::PolicyViolation(_))));
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let out = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let y = Targets::Class(vec![2, 0]);
        let lik = Likelihood::CategoricalSoftmax;
        let g = lik.log_likelihood_grad(out.view(), &y);
        let h = 1e-6;
        for i in 0..2 {
            for q in 0..3 {
                let mut a = out.clone();
                let mut b = out.clone();
                a[[i, q]] += h;
                b[[i, q]] -= h;
                let fd = (lik.log_likelihood(a.view(), &y) - lik.log_likelihood(b.view(), &y)) / (2.0 * h);
                assert_abs_diff_eq!(g[[i, q]], fd, epsilon = 1e-8);
            }
        }
    }
}

#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::network::{init_params, Activation, InitScheme};
    use ndarray::array;

    struct Problem {
        spec: MlpSpec,
        q: VariationalPosterior,
        prior: PriorSpec,
        x: Array2<f64>,
        y: Targets,
        contexts: ContextBatch,
        config: ObjectiveConfig,
    }

    fn problem(point: LinearizationPoint, policy: GradPolicy, sizes: Vec<usize>) -> Problem {
        let spec = MlpSpec::with_activation(sizes, Activation::Tanh).unwrap();
        let mut rng = crate::seeded_rng(11);
        let mu = init_params(&spec, &mut rng, InitScheme::UniformFanIn).to_vec();
        let mut q = VariationalPosterior::with_sigma(mu, 0.1).unwrap();
        for (k, r) in q.rho.iter_mut().enumerate() {
            *r += 0.3 * ((k as f64) * 0.7).sin();
        }
        let mut prior = PriorSpec::isotropic(0.8).unwrap();
        prior.linearization_point = point;
        if point == LinearizationPoint::PriorMean {
            prior.mean =
                PriorMean::Vector((0..spec.num_params()).map(|k| 0.5 * ((k as f64) * 1.3).cos()).collect());
        }
        let x = array![[0.2], [-0.7], [1.1]];
        let y = Targets::Real(array![[0.3], [-0.1], [0.8]]);
        let contexts =
            ContextBatch::new(vec![array![[0.5], [-1.5], [2.0]], array![[0.0], [1.0], [-0.4]]]).unwrap();
        let mut config = ObjectiveConfig::new(&spec);
        config.mc_samples = 3;
        config.grad_policy = policy;
        config.jitter = JitterSchedule::only(0.0).unwrap();
        Problem { spec, q, prior, x, y, contexts, config }
    }

    fn neg_elbo(p: &Problem, q: &VariationalPosterior) -> f64 {
        let lik = Likelihood::GaussianRegression { noise_variance: 0.2 };
        let batch = Batch { x: p.x.view(), y: &p.y };
        -elbo(q, &p.prior, &p.spec, batch, &p.contexts, &lik, &p.config, &mut crate::seeded_rng(5)).unwrap().0
    }

    fn check(p: &Problem) -> f64 {
        let lik = Likelihood::GaussianRegression { noise_variance: 0.2 };
        let batch = Batch { x: p.x.view(), y: &p.y };
        let g = elbo_grad(
            &p.q,
            &p.prior,
            &p.spec,
            batch,
            &p.contexts,
            &lik,
            &p.config,
            &mut crate::seeded_rng(5),
        )
        .unwrap();
        let h = 1e-5;
        let mut fd = Vec::new();
        for (which, k) in (0..2).flat_map(|w| (0..p.q.len()).map(move |k| (w, k))) {
            let mut a = p.q.clone();
            let mut b = p.q.clone();
            let (va, vb) = if which == 0 { (&mut a.mu, &mut b.mu) } else { (&mut a.rho, &mut b.rho) };
            va[k] += h;
            vb[k] -= h;
            fd.push((neg_elbo(p, &a) - neg_elbo(p, &b)) / (2.0 * h));
        }
        let an: Vec<f64> = g.mu.iter().chain(&g.rho).copied().collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        an.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn exact_gradients_shared_point() {
        let p = problem(LinearizationPoint::SharedVariationalMean, GradPolicy::ExactSmallNet, vec![1, 4, 1]);
        let err = check(&p);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn exact_gradients_prior_point() {
        let p = problem(LinearizationPoint::PriorMean, GradPolicy::ExactSmallNet, vec![1, 4, 1]);
        let err = check(&p);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn exact_gradients_two_hidden_layers() {
        let p =
            problem(LinearizationPoint::SharedVariationalMean, GradPolicy::ExactSmallNet, vec![1, 3, 4, 1]);
        let err = check(&p);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn policies_agree_on_linear_nets() {
        let mut p =
            problem(LinearizationPoint::SharedVariationalMean, GradPolicy::StopGradJacobian, vec![1, 1]);
        let spec = MlpSpec::new(vec![1, 1], vec![]).unwrap();
        p.q = VariationalPosterior::new(vec![0.4, -0.3], vec![inverse_softplus(0.2), inverse_softplus(0.5)])
            .unwrap();
        p.config = ObjectiveConfig::new(&spec);
        p.config.grad_policy = GradPolicy::StopGradJacobian;
        p.contexts = ContextBatch::new(vec![array![[0.5]], array![[2.0]]]).unwrap();
        p.spec = spec;
        let err = check(&p);
        assert!(err < 1e-5, "relative error {err}");
    }
}
