//! Function-space variational inference (FSVI) for Bayesian multi-layer perceptrons.
//!
//! The crate is organised bottom-up:
//!
//! - [`gaussian`]: Cholesky with jitter escalation, Gaussian KL divergences, sampling.
//! - [`network`]: MLP definition, flat parameter layout, forward pass and parameter Jacobians.
//! - [`linearization`]: pushing a mean-field Gaussian through the linearized network.
//! - [`objective`]: function-space KL, the context-set supremum estimator, the ELBO and its
//!   gradients.
//! - [`context`]: context distributions used to evaluate the function-space KL.
//! - [`training`]: Adam and the epoch/batch loop.
//! - [`predictive`]: posterior predictive and uncertainty metrics.
//! - [`data`]: generators, CSV ingestion, standardization and splitting.
//! - [`checkpoint`]: versioned checkpoint files.
//!
//! Data-parallel inner loops (Jacobian rows, Monte Carlo draws, context sets) run on rayon
//! when the default `parallel` feature is enabled. Results are bitwise identical with the
//! feature disabled: every reduction is performed sequentially in index order.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod context;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod linearization;
pub mod network;
pub mod objective;
pub mod par;
pub mod predictive;
pub mod training;

pub use error::{FsviError, Result};

/// Seeded generator used everywhere in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
