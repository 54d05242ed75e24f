//! Debiased multilevel Monte Carlo estimators of the log marginal likelihood
//! of latent-variable models, and of its gradient.
//!
//! The building block is the importance-weighted bound
//! `L̂_K(x) = log (1/K) Σ_k p_θ(x, z_k) / q(z_k; x)`. On top of it sit nested
//! Monte Carlo, coupled multilevel Monte Carlo, its randomized unbiased
//! variant, SUMO and the jackknife, plus level allocation, an Adam training
//! loop, diagnostics and a variational treatment of global parameters.

pub mod allocation;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod lmelbo;
pub mod math;
pub mod model;
pub mod models;
pub mod optimizer;
pub mod proposals;
pub mod rng;
pub mod weights;

pub use error::{Error, Result};
pub use model::{DataPoint, Dataset, LatentVariableModel, ProposalDist};
