//! Coupled multilevel corrections and the (randomized) MLMC estimators.
//!
//! At level `ℓ ≥ 1` a single set of `2^ℓ` inner draws gives the full-row
//! bound and the two half-row bounds; the correction is
//! `Δ = L̂_{2^ℓ} - (L̂^(a)_{2^{ℓ-1}} + L̂^(b)_{2^{ℓ-1}}) / 2`.
//! Level 0 is the single-sample bound.

use super::{
    check_theta, inner_stream, level_stream, run_minibatch, sum_points, EvidenceEstimate,
    GradientEstimate, LevelContribution, PointResult,
};
use crate::allocation::AllocationPlan;
use crate::error::{Error, Result};
use crate::model::{DataPoint, Dataset, LatentVariableModel};
use crate::rng::RandomStream;
use crate::weights::draw_log_weights;

/// Truncation level used by [`LevelWeights::default`].
pub const DEFAULT_MAX_LEVEL: usize = 14;

/// One coupled correction sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDelta {
    pub level: usize,
    pub delta: f64,
    pub gradient: Option<Vec<f64>>,
    pub cost: u64,
    /// `L̂_{2^ℓ}` on the full row.
    pub full: f64,
    /// `(L̂^(a), L̂^(b))` on the two halves; `None` at level 0.
    pub halves: Option<(f64, f64)>,
}

fn level_delta<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    level: usize,
    stream: &mut RandomStream,
    with_grad: bool,
) -> Result<LevelDelta> {
    if level >= 63 {
        return Err(Error::InvalidArgument(format!("level {level} is too large")));
    }
    let k = 1usize << level;
    let before = stream.normals_drawn();
    let row = draw_log_weights(model, x, theta, k, stream, with_grad)?;
    let cost = (stream.normals_drawn() - before) / model.latent_dim() as u64;
    let full = row.iwelbo();
    if level == 0 {
        return Ok(LevelDelta {
            level,
            delta: full,
            gradient: with_grad.then(|| row.iwelbo_gradient()),
            cost,
            full,
            halves: None,
        });
    }
    let half = k / 2;
    let a = row.iwelbo_range(0..half);
    let b = row.iwelbo_range(half..k);
    let gradient = with_grad.then(|| {
        let gf = row.iwelbo_gradient();
        let ga = row.iwelbo_gradient_range(0..half);
        let gb = row.iwelbo_gradient_range(half..k);
        gf.iter()
            .zip(ga.iter().zip(&gb))
            .map(|(f, (a, b))| f - 0.5 * (a + b))
            .collect()
    });
    Ok(LevelDelta {
        level,
        delta: full - 0.5 * (a + b),
        gradient,
        cost,
        full,
        halves: Some((a, b)),
    })
}

/// Scalar correction `Δ L̂_{1,2^ℓ}` for one data point.
pub fn mlmc_delta<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    level: usize,
    stream: &mut RandomStream,
) -> Result<LevelDelta> {
    level_delta(model, x, theta, level, stream, false)
}

/// Scalar and gradient correction from the same inner draws.
pub fn mlmc_gradient_delta<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    level: usize,
    stream: &mut RandomStream,
) -> Result<LevelDelta> {
    level_delta(model, x, theta, level, stream, true)
}

fn mlmc<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    plan: &AllocationPlan,
    n_total: f64,
    seed: u64,
    with_grad: bool,
) -> Result<GradientEstimate> {
    check_theta(model, theta)?;
    plan.validate()?;
    let p = model.param_dim();
    let mut value = 0.0;
    let mut vector = vec![0.0; p];
    let mut cost = 0;
    let mut breakdown = Vec::with_capacity(plan.max_level + 1);
    for (level, &m) in plan.minibatch.iter().enumerate() {
        let points = run_minibatch(data, m, seed, level as u32, |idx, slot, _| {
            let mut s = inner_stream(seed, level as u32, slot);
            let d = level_delta(model, &data.points[idx], theta, level, &mut s, with_grad)?;
            Ok(PointResult {
                level,
                value: d.delta,
                grad: d.gradient,
                cost: d.cost,
            })
        })?;
        let sum = sum_points(&points, p);
        let scale = n_total / m as f64;
        let level_value = scale * sum.value;
        value += level_value;
        for (v, g) in vector.iter_mut().zip(&sum.grad) {
            *v += scale * g;
        }
        cost += sum.cost;
        breakdown.push(LevelContribution {
            level,
            value: level_value,
            minibatch: m,
            cost: sum.cost,
        });
    }
    Ok(GradientEstimate {
        vector,
        value,
        inner_sample_cost: cost,
        level_breakdown: Some(breakdown),
    })
}

/// `Σ_ℓ (N/M_ℓ) Σ_m Δ_ℓ L̂_m` with an independent mini-batch per level.
pub fn mlmc_evidence<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    plan: &AllocationPlan,
    n_total: f64,
    seed: u64,
) -> Result<EvidenceEstimate> {
    let g = mlmc(model, data, theta, plan, n_total, seed, false)?;
    Ok(EvidenceEstimate {
        value: g.value,
        inner_sample_cost: g.inner_sample_cost,
        level_breakdown: g.level_breakdown,
    })
}

pub fn mlmc_gradient<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    plan: &AllocationPlan,
    n_total: f64,
    seed: u64,
) -> Result<GradientEstimate> {
    mlmc(model, data, theta, plan, n_total, seed, true)
}

/// Level distribution `ω` for the randomized estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelWeights {
    omega: Vec<f64>,
    cdf: Vec<f64>,
}

impl LevelWeights {
    /// Validates positivity and unit mass (to 1e-9), then renormalizes.
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::InvalidArgument("level weights must be non-empty".into()));
        }
        if omega.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("level weights must be positive".into()));
        }
        let total: f64 = omega.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("level weights sum to {total}, not 1")));
        }
        Ok(Self::normalized(omega))
    }

    fn normalized(mut omega: Vec<f64>) -> Self {
        let total: f64 = omega.iter().sum();
        omega.iter_mut().for_each(|w| *w /= total);
        let mut acc = 0.0;
        let cdf = omega
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { omega, cdf }
    }

    /// `ω_ℓ ∝ 2^{-(β+1)ℓ/2}` for `ℓ = 0..=max_level`.
    pub fn geometric(beta: f64, max_level: usize) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite".into()));
        }
        let omega = (0..=max_level)
            .map(|l| (-(beta + 1.0) * l as f64 / 2.0).exp2())
            .collect();
        Ok(Self::normalized(omega))
    }

    /// All mass on level 0.
    pub fn single_level() -> Self {
        Self::normalized(vec![1.0])
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn max_level(&self) -> usize {
        self.omega.len() - 1
    }

    /// Inverse-CDF draw for `u ∈ [0, 1)`.
    pub fn sample(&self, u: f64) -> usize {
        self.cdf
            .iter()
            .position(|c| u < *c)
            .unwrap_or(self.omega.len() - 1)
    }

    /// `Σ_ℓ ω_ℓ 2^ℓ`.
    pub fn expected_cost(&self) -> f64 {
        self.omega
            .iter()
            .enumerate()
            .map(|(l, w)| w * (l as f64).exp2())
            .sum()
    }
}

impl Default for LevelWeights {
    fn default() -> Self {
        Self::geometric(2.0, DEFAULT_MAX_LEVEL).expect("finite beta")
    }
}

#[allow(clippy::too_many_arguments)]
fn randomized<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    weights: &LevelWeights,
    m: usize,
    n_total: f64,
    seed: u64,
    with_grad: bool,
) -> Result<GradientEstimate> {
    check_theta(model, theta)?;
    let p = model.param_dim();
    let points = run_minibatch(data, m, seed, 0, |idx, slot, _| {
        let level = weights.sample(level_stream(seed, 0, slot).uniform());
        let mut s = inner_stream(seed, 0, slot);
        let d = level_delta(model, &data.points[idx], theta, level, &mut s, with_grad)?;
        let inv = 1.0 / weights.omega[level];
        Ok(PointResult {
            level,
            value: d.delta * inv,
            grad: d.gradient.map(|g| g.into_iter().map(|v| v * inv).collect()),
            cost: d.cost,
        })
    })?;
    let sum = sum_points(&points, p);
    let scale = n_total / m as f64;

    let mut breakdown: Vec<LevelContribution> = (0..=weights.max_level())
        .map(|level| LevelContribution {
            level,
            value: 0.0,
            minibatch: 0,
            cost: 0,
        })
        .collect();
    for pt in &points {
        let c = &mut breakdown[pt.level];
        c.value += scale * pt.value;
        c.minibatch += 1;
        c.cost += pt.cost;
    }

    Ok(GradientEstimate {
        vector: sum.grad.iter().map(|g| scale * g).collect(),
        value: scale * sum.value,
        inner_sample_cost: sum.cost,
        level_breakdown: Some(breakdown),
    })
}

/// `(N/M) Σ_m Δ L̂_{1,2^{ℓ(m)}} / ω_{ℓ(m)}` with `ℓ(m) ~ ω`.
pub fn randomized_mlmc_evidence<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    weights: &LevelWeights,
    m: usize,
    n_total: f64,
    seed: u64,
) -> Result<EvidenceEstimate> {
    let g = randomized(model, data, theta, weights, m, n_total, seed, false)?;
    Ok(EvidenceEstimate {
        value: g.value,
        inner_sample_cost: g.inner_sample_cost,
        level_breakdown: g.level_breakdown,
    })
}

pub fn randomized_mlmc_gradient<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    weights: &LevelWeights,
    m: usize,
    n_total: f64,
    seed: u64,
) -> Result<GradientEstimate> {
    randomized(model, data, theta, weights, m, n_total, seed, true)
}
