//! SUMO: Russian-roulette sum of successive bound differences.
//!
//! With survival `S(k) = P(𝒦 ≥ k)` the per-point estimate is
//! `Σ_{k ≤ 𝒦} (L̂_k - L̂_{k-1}) / S(k)` with `L̂_0 = 0`, where all `L̂_k` share
//! the same `𝒦` inner draws and are accumulated with a running log-sum-exp.

use super::{
    check_theta, inner_stream, level_stream, run_minibatch, sum_points, EvidenceEstimate,
    GradientEstimate, PointResult,
};
use crate::error::{Error, Result};
use crate::math::{harmonic, log_add_exp};
use crate::model::{DataPoint, Dataset, LatentVariableModel};
use crate::rng::RandomStream;
use crate::weights::draw_log_weights;

/// Soft-truncation knee `a`.
pub const DEFAULT_SUMO_KNEE: usize = 80;

const SOFT_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationMode {
    /// `S(k) = 1/k` up to `k_max`, zero beyond.
    Hard,
    /// `S(k) = 1/k` below the knee, `(1/a) 0.9^{k-a}` from it on.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumoTruncation {
    pub mode: TruncationMode,
    pub knee: usize,
    pub k_max: usize,
}

impl SumoTruncation {
    pub fn hard(k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::InvalidArgument("SUMO K_max must be at least 1".into()));
        }
        Ok(Self {
            mode: TruncationMode::Hard,
            knee: DEFAULT_SUMO_KNEE,
            k_max,
        })
    }

    pub fn soft(knee: usize) -> Result<Self> {
        if knee == 0 {
            return Err(Error::InvalidArgument("SUMO knee must be at least 1".into()));
        }
        Ok(Self {
            mode: TruncationMode::Soft,
            knee,
            k_max: usize::MAX,
        })
    }

    /// `P(𝒦 ≥ k)`.
    pub fn survival(&self, k: usize) -> f64 {
        match self.mode {
            TruncationMode::Hard if k > self.k_max => 0.0,
            _ if k <= 1 => 1.0,
            TruncationMode::Soft if k >= self.knee => {
                SOFT_DECAY.powi((k - self.knee) as i32) / self.knee as f64
            }
            _ => 1.0 / k as f64,
        }
    }

    /// Inverse-survival draw for `u ∈ (0, 1]`: the largest `k` with `S(k) ≥ u`.
    pub fn sample(&self, u: f64) -> usize {
        match self.mode {
            TruncationMode::Hard => (1.0 / u).floor().min(self.k_max as f64) as usize,
            TruncationMode::Soft => {
                let a = self.knee as f64;
                if u * a >= 1.0 {
                    (1.0 / u).floor() as usize
                } else {
                    self.knee + ((u * a).ln() / SOFT_DECAY.ln()).floor() as usize
                }
            }
        }
    }

    /// `E[𝒦] = Σ_k S(k)`.
    pub fn expected_k(&self) -> f64 {
        match self.mode {
            TruncationMode::Hard => harmonic(self.k_max),
            TruncationMode::Soft => {
                harmonic(self.knee - 1) + 1.0 / ((1.0 - SOFT_DECAY) * self.knee as f64)
            }
        }
    }
}

/// Per-point SUMO value (and gradient) for a given `𝒦`.
fn sumo_point<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    trunc: &SumoTruncation,
    k_draw: usize,
    stream: &mut RandomStream,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>, u64)> {
    let before = stream.normals_drawn();
    let row = draw_log_weights(model, x, theta, k_draw, stream, with_grad)?;
    let cost = (stream.normals_drawn() - before) / model.latent_dim() as u64;
    let lw = row.log_weights();
    let p = model.param_dim();

    let mut value = 0.0;
    let mut prev_bound = 0.0;
    let mut lse = f64::NEG_INFINITY;
    let mut g_prev = vec![0.0; if with_grad { p } else { 0 }];
    let mut g_cur = g_prev.clone();
    let mut grad = g_prev.clone();
    for k in 1..=k_draw {
        let w = lw[k - 1];
        let lse_next = log_add_exp(lse, w);
        let bound = lse_next - (k as f64).ln();
        let inv_s = 1.0 / trunc.survival(k);
        value += (bound - prev_bound) * inv_s;
        if with_grad {
            let keep = (lse - lse_next).exp();
            let new = (w - lse_next).exp();
            for ((c, prev), gk) in g_cur.iter_mut().zip(&g_prev).zip(row.grad(k - 1)) {
                *c = prev * keep + gk * new;
            }
            for ((o, c), prev) in grad.iter_mut().zip(&g_cur).zip(&g_prev) {
                *o += (c - prev) * inv_s;
            }
            std::mem::swap(&mut g_prev, &mut g_cur);
        }
        lse = lse_next;
        prev_bound = bound;
    }
    Ok((value, with_grad.then_some(grad), cost))
}

fn draw_k(trunc: &SumoTruncation, stream: &mut RandomStream) -> usize {
    trunc.sample(stream.uniform_open0())
}

/// Single-point SUMO estimate; `𝒦` is drawn from `stream` before the latents.
pub fn sumo_evidence<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    trunc: &SumoTruncation,
    stream: &mut RandomStream,
) -> Result<EvidenceEstimate> {
    check_theta(model, theta)?;
    let k = draw_k(trunc, stream);
    let (value, _, cost) = sumo_point(model, x, theta, trunc, k, stream, false)?;
    Ok(EvidenceEstimate {
        value,
        inner_sample_cost: cost,
        level_breakdown: None,
    })
}

pub fn sumo_gradient<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    trunc: &SumoTruncation,
    stream: &mut RandomStream,
) -> Result<GradientEstimate> {
    check_theta(model, theta)?;
    let k = draw_k(trunc, stream);
    let (value, grad, cost) = sumo_point(model, x, theta, trunc, k, stream, true)?;
    Ok(GradientEstimate {
        vector: grad.unwrap_or_default(),
        value,
        inner_sample_cost: cost,
        level_breakdown: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn sumo_batch<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    trunc: &SumoTruncation,
    m: usize,
    n_total: f64,
    seed: u64,
    with_grad: bool,
) -> Result<GradientEstimate> {
    check_theta(model, theta)?;
    let points = run_minibatch(data, m, seed, 0, |idx, slot, _| {
        let k = draw_k(trunc, &mut level_stream(seed, 0, slot));
        let mut s = inner_stream(seed, 0, slot);
        let (value, grad, cost) =
            sumo_point(model, &data.points[idx], theta, trunc, k, &mut s, with_grad)?;
        Ok(PointResult {
            level: 0,
            value,
            grad,
            cost,
        })
    })?;
    let sum = sum_points(&points, model.param_dim());
    let scale = n_total / m as f64;
    Ok(GradientEstimate {
        vector: sum.grad.iter().map(|g| scale * g).collect(),
        value: scale * sum.value,
        inner_sample_cost: sum.cost,
        level_breakdown: None,
    })
}

/// `(N/M) Σ_m` of per-point SUMO estimates.
pub fn sumo_batch_evidence<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    trunc: &SumoTruncation,
    m: usize,
    n_total: f64,
    seed: u64,
) -> Result<EvidenceEstimate> {
    let g = sumo_batch(model, data, theta, trunc, m, n_total, seed, false)?;
    Ok(EvidenceEstimate {
        value: g.value,
        inner_sample_cost: g.inner_sample_cost,
        level_breakdown: None,
    })
}

pub fn sumo_batch_gradient<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    trunc: &SumoTruncation,
    m: usize,
    n_total: f64,
    seed: u64,
) -> Result<GradientEstimate> {
    sumo_batch(model, data, theta, trunc, m, n_total, seed, true)
}
