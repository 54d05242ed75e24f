//! Evidence and gradient estimators.
//!
//! Every estimator here targets `log p_θ(x_{1:N})` and returns values already
//! scaled by `N` (`n_total`). Randomness is drawn from streams keyed by
//! `(seed, purpose, level, m)`, so a call is a pure function of its inputs
//! regardless of how rayon schedules the mini-batch.

mod jackknife;
mod mlmc;
mod nested;
mod sumo;

use rayon::prelude::*;

use crate::allocation::AllocationPlan;
use crate::error::{Error, Result};
use crate::model::{Dataset, LatentVariableModel};
use crate::rng::{derive_stream, Purpose, RandomStream, StreamKey};

pub use jackknife::{
    jackknife_batch_evidence, jackknife_batch_gradient, jackknife_evidence, jackknife_gradient,
    leave_one_out_iwelbo, leave_one_out_iwelbo_direct, leave_one_out_iwelbo_prefix_suffix,
    JACKKNIFE_DIRECT_LIMIT,
};
pub use mlmc::{
    mlmc_delta, mlmc_evidence, mlmc_gradient, mlmc_gradient_delta, randomized_mlmc_evidence,
    randomized_mlmc_gradient, LevelDelta, LevelWeights, DEFAULT_MAX_LEVEL,
};
pub use nested::{nmc_evidence, nmc_gradient};
pub use sumo::{
    sumo_batch_evidence, sumo_batch_gradient, sumo_evidence, sumo_gradient, SumoTruncation,
    TruncationMode, DEFAULT_SUMO_KNEE,
};

/// One level's share of a multilevel estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelContribution {
    pub level: usize,
    pub value: f64,
    pub minibatch: usize,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceEstimate {
    pub value: f64,
    pub inner_sample_cost: u64,
    pub level_breakdown: Option<Vec<LevelContribution>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    /// The evidence estimate computed from the same inner samples.
    pub value: f64,
    pub inner_sample_cost: u64,
    pub level_breakdown: Option<Vec<LevelContribution>>,
}

/// Per-point output of an estimator kernel.
#[derive(Debug, Clone)]
pub(crate) struct PointResult {
    pub level: usize,
    pub value: f64,
    pub grad: Option<Vec<f64>>,
    pub cost: u64,
}

/// Summed mini-batch output before scaling.
#[derive(Debug, Clone)]
pub(crate) struct BatchSum {
    pub value: f64,
    pub grad: Vec<f64>,
    pub cost: u64,
}

pub(crate) fn inner_stream(seed: u64, level: u32, m: u64) -> RandomStream {
    derive_stream(StreamKey::new(seed, Purpose::InnerSample, level, m))
}

pub(crate) fn level_stream(seed: u64, level: u32, m: u64) -> RandomStream {
    derive_stream(StreamKey::new(seed, Purpose::LevelDraw, level, m))
}

/// Draws `m` data indices uniformly with replacement and evaluates `kernel`
/// on each. The kernel receives the data index, the slot `m` and the data
/// stream (positioned after the index draw).
pub(crate) fn run_minibatch<F>(
    data: &Dataset,
    m: usize,
    seed: u64,
    level: u32,
    kernel: F,
) -> Result<Vec<PointResult>>
where
    F: Fn(usize, u64, &mut RandomStream) -> Result<PointResult> + Sync + Send,
{
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot draw a mini-batch from an empty dataset".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("mini-batch size must be at least 1".into()));
    }
    let n = data.len();
    (0..m as u64)
        .into_par_iter()
        .map(|slot| {
            let mut ds = derive_stream(StreamKey::new(seed, Purpose::DataDraw, level, slot));
            let idx = ds.index(n);
            kernel(idx, slot, &mut ds)
        })
        .collect::<Result<Vec<_>>>()
}

/// Sums point results in slot order.
pub(crate) fn sum_points(results: &[PointResult], param_dim: usize) -> BatchSum {
    let mut sum = BatchSum {
        value: 0.0,
        grad: vec![0.0; param_dim],
        cost: 0,
    };
    for r in results {
        sum.value += r.value;
        sum.cost += r.cost;
        if let Some(g) = &r.grad {
            for (s, gi) in sum.grad.iter_mut().zip(g) {
                *s += gi;
            }
        }
    }
    sum
}

pub(crate) fn check_theta<M: LatentVariableModel + ?Sized>(model: &M, theta: &[f64]) -> Result<()> {
    crate::error::check_dim("theta", model.param_dim(), theta.len())
}

/// A fully configured estimator, as used by the optimization loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    Nmc { k: usize, m: usize },
    Mlmc { plan: AllocationPlan },
    RandomizedMlmc { weights: LevelWeights, m: usize },
    Sumo { truncation: SumoTruncation, m: usize },
    Jackknife { k: usize, m: usize },
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::Nmc { k, .. } => format!("NMC (K={k})"),
            Estimator::Mlmc { plan } => format!("MLMC (L={})", plan.max_level),
            Estimator::RandomizedMlmc { weights, .. } => {
                format!("RandMLMC (L={})", weights.max_level())
            }
            Estimator::Sumo { truncation, .. } => match truncation.mode {
                TruncationMode::Hard => format!("SUMO (K={})", truncation.k_max),
                TruncationMode::Soft => format!("SUMO (a={})", truncation.knee),
            },
            Estimator::Jackknife { k, .. } => format!("Jackknife (K={k})"),
        }
    }

    /// Expected inner samples per call.
    pub fn expected_cost(&self) -> f64 {
        match self {
            Estimator::Nmc { k, m } | Estimator::Jackknife { k, m } => (k * m) as f64,
            Estimator::Mlmc { plan } => plan.cost() as f64,
            Estimator::RandomizedMlmc { weights, m } => *m as f64 * weights.expected_cost(),
            Estimator::Sumo { truncation, m } => *m as f64 * truncation.expected_k(),
        }
    }

    pub fn evidence<M: LatentVariableModel + ?Sized>(
        &self,
        model: &M,
        data: &Dataset,
        theta: &[f64],
        n_total: f64,
        seed: u64,
    ) -> Result<EvidenceEstimate> {
        match self {
            Estimator::Nmc { k, m } => nmc_evidence(model, data, theta, *m, *k, n_total, seed),
            Estimator::Mlmc { plan } => mlmc_evidence(model, data, theta, plan, n_total, seed),
            Estimator::RandomizedMlmc { weights, m } => {
                randomized_mlmc_evidence(model, data, theta, weights, *m, n_total, seed)
            }
            Estimator::Sumo { truncation, m } => {
                sumo_batch_evidence(model, data, theta, truncation, *m, n_total, seed)
            }
            Estimator::Jackknife { k, m } => {
                jackknife_batch_evidence(model, data, theta, *k, *m, n_total, seed)
            }
        }
    }

    pub fn gradient<M: LatentVariableModel + ?Sized>(
        &self,
        model: &M,
        data: &Dataset,
        theta: &[f64],
        n_total: f64,
        seed: u64,
    ) -> Result<GradientEstimate> {
        match self {
            Estimator::Nmc { k, m } => nmc_gradient(model, data, theta, *m, *k, n_total, seed),
            Estimator::Mlmc { plan } => mlmc_gradient(model, data, theta, plan, n_total, seed),
            Estimator::RandomizedMlmc { weights, m } => {
                randomized_mlmc_gradient(model, data, theta, weights, *m, n_total, seed)
            }
            Estimator::Sumo { truncation, m } => {
                sumo_batch_gradient(model, data, theta, truncation, *m, n_total, seed)
            }
            Estimator::Jackknife { k, m } => {
                jackknife_batch_gradient(model, data, theta, *k, *m, n_total, seed)
            }
        }
    }
}
