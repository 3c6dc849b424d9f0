//! A parallel MCMC engine built around the question of how much computation
//! a run actually needs: how many chains, how long a warmup, and how long a
//! sampling phase.
//!
//! The crate provides:
//! - [`model`]: built-in target densities with analytic gradients and moments;
//! - [`samplers`]: random-walk Metropolis, MALA, and fixed-length HMC kernels
//!   with windowed warmup adaptation, including cross-chain pooling;
//! - [`engine`]: parallel multi-chain execution with deterministic
//!   counter-based random streams, initialization groups, the
//!   many-short-chains regime, and target-ESS adaptive stopping;
//! - [`diagnostics`]: per-quantity R-hat, split R-hat, nested R-hat, ESS,
//!   MCSE, and quantile reporting;
//! - [`oracle`]: analytic Ornstein-Uhlenbeck ground truth, total variation
//!   distances, relaxation times, and error decompositions for validating
//!   the whole stack.

pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod samplers;
pub mod stats;

pub use error::{Error, Result};
