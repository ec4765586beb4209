//! Pushforward of a mean-field Gaussian through the linearized network.
//!
//! Around a linearization point `m`, `f(X; θ) ≈ f(X; m) + J(X; m)(θ − m)`. A Gaussian over
//! `θ` is then mapped to a Gaussian over the stacked outputs, with rows ordered `i·Q + q`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, FsviError, Result};
use crate::gaussian::{symmetrize, DiagonalGaussian, FunctionGaussian};
use crate::network::{MlpSpec, Partition};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizationMode {
    Exact,
    McPartition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationConfig {
    pub mode: LinearizationMode,
    /// Number of α draws `R`.
    pub samples: usize,
    pub partition: Partition,
}

impl LinearizationConfig {
    /// The training default: α/β estimator with a single α draw.
    pub fn mc(spec: &MlpSpec) -> Self {
        Self { mode: LinearizationMode::McPartition, samples: 1, partition: Partition::final_layer(spec) }
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        if self.samples == 0 {
            return Err(FsviError::InvalidParameter("R must be at least 1".into()));
        }
        self.partition.validate(spec)
    }
}

/// Equal-weight mixture of Gaussians over function values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub components: Vec<FunctionGaussian>,
}

impl GaussianMixture {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn mean(&self) -> Array1<f64> {
        let mut m = Array1::<f64>::zeros(self.components[0].dim());
        for c in &self.components {
            m += &c.mean;
        }
        m / self.components.len() as f64
    }

    /// Average of the component covariances.
    pub fn within_covariance(&self) -> Array2<f64> {
        let k = self.components[0].dim();
        let mut s = Array2::<f64>::zeros((k, k));
        for c in &self.components {
            s += &c.covariance;
        }
        s / self.components.len() as f64
    }

    /// Covariance of the component means (population normalization).
    pub fn between_covariance(&self) -> Array2<f64> {
        let mean = self.mean();
        let k = mean.len();
        let mut s = Array2::<f64>::zeros((k, k));
        for c in &self.components {
            let d = &c.mean - &mean;
            for a in 0..k {
                for b in 0..k {
                    s[[a, b]] += d[a] * d[b];
                }
            }
        }
        s / self.components.len() as f64
    }

    pub fn total_covariance(&self) -> Array2<f64> {
        self.within_covariance() + self.between_covariance()
    }
}

fn flatten(outputs: Array2<f64>) -> Array1<f64> {
    let n = outputs.len();
    outputs.into_shape_with_order(n).unwrap()
}

fn check_dist(g: &DiagonalGaussian, spec: &MlpSpec) -> Result<()> {
    if g.len() != spec.num_params() {
        return Err(dim_mismatch("distribution length", spec.num_params(), g.len()));
    }
    Ok(())
}

/// `N(f(X; m), J diag(S) Jᵀ)` with `J` the full parameter Jacobian at the mean.
pub fn push_forward_exact(
    g: &DiagonalGaussian,
    spec: &MlpSpec,
    x: ArrayView2<f64>,
) -> Result<FunctionGaussian> {
    check_dist(g, spec)?;
    let mean = flatten(spec.forward(g.mean(), x)?);
    let jac = spec.param_jacobian(g.mean(), x)?;
    let mut scaled = jac.clone();
    for (mut row_s, _) in scaled.rows_mut().into_iter().zip(0..) {
        for (v, s) in row_s.iter_mut().zip(g.variance()) {
            *v *= s;
        }
    }
    let mut cov = scaled.dot(&jac.t());
    symmetrize(&mut cov);
    FunctionGaussian::new(mean, cov)
}

/// Per-output covariance blocks `H diag(S_Wq) Hᵀ + S_bq·11ᵀ` of the final-layer pushforward.
///
/// `features` is N×H; `beta_variance` follows the final-layer parameter layout.
pub fn beta_covariance_blocks(
    features: ArrayView2<f64>,
    beta_variance: &[f64],
    q_dim: usize,
) -> Result<Vec<Array2<f64>>> {
    let (n, h) = features.dim();
    if beta_variance.len() != (h + 1) * q_dim {
        return Err(dim_mismatch("final-layer variance length", (h + 1) * q_dim, beta_variance.len()));
    }
    Ok((0..q_dim)
        .map(|q| {
            let sw = &beta_variance[q * h..(q + 1) * h];
            let sb = beta_variance[q_dim * h + q];
            let mut scaled = features.to_owned();
            for mut row in scaled.rows_mut() {
                for (v, s) in row.iter_mut().zip(sw) {
                    *v *= s;
                }
            }
            let mut block = scaled.dot(&features.t());
            block.mapv_inplace(|v| v + sb);
            symmetrize(&mut block);
            debug_assert_eq!(block.nrows(), n);
            block
        })
        .collect())
}

/// Scatters per-output blocks into the full (N·Q)×(N·Q) covariance.
pub fn assemble_blocks(blocks: &[Array2<f64>]) -> Array2<f64> {
    let q_dim = blocks.len();
    let n = blocks[0].nrows();
    let mut cov = Array2::<f64>::zeros((n * q_dim, n * q_dim));
    for (q, b) in blocks.iter().enumerate() {
        for i in 0..n {
            for k in 0..n {
                cov[[i * q_dim + q, k * q_dim + q]] = b[[i, k]];
            }
        }
    }
    cov
}

/// Scaled α perturbations `√S_α ⊙ ε`, embedded in a full-length direction with zero β part.
pub(crate) fn alpha_directions<R: Rng + ?Sized>(
    g: &DiagonalGaussian,
    partition: &Partition,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let mut d = vec![0.0; g.len()];
            for k in partition.alpha() {
                let e: f64 = rng.sample(StandardNormal);
                d[k] = g.variance()[k].sqrt() * e;
            }
            d
        })
        .collect()
}

/// The α/β estimator: `R` equal-weight components with means
/// `f(X; m) + J_α(X; m)(θ_α⁽ʲ⁾ − m_α)` and the shared covariance `J_β diag(S_β) J_βᵀ`.
///
/// Only the final-layer Jacobian is materialized; the α term is a Jacobian–vector product.
/// With `LinearizationMode::Exact` a single component equal to [`push_forward_exact`] is
/// returned and no randomness is consumed.
pub fn push_forward_mc<R: Rng + ?Sized>(
    g: &DiagonalGaussian,
    spec: &MlpSpec,
    x: ArrayView2<f64>,
    config: &LinearizationConfig,
    rng: &mut R,
) -> Result<GaussianMixture> {
    check_dist(g, spec)?;
    config.validate(spec)?;
    if config.mode == LinearizationMode::Exact {
        return Ok(GaussianMixture { components: vec![push_forward_exact(g, spec, x)?] });
    }
    let (out, feats) = spec.forward_with_features(g.mean(), x)?;
    let base = flatten(out);
    let beta = config.partition.beta();
    let blocks = beta_covariance_blocks(feats.view(), &g.variance()[beta], spec.output_dim())?;
    let cov = assemble_blocks(&blocks);
    let directions = alpha_directions(g, &config.partition, config.samples, rng);
    let offsets = par::map_slice(&directions, |d| spec.jvp(g.mean(), x, d));
    let components = offsets
        .into_iter()
        .map(|o| {
            let mean = &base + &flatten(o?);
            Ok(FunctionGaussian { mean, covariance: cov.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianMixture { components })
}
