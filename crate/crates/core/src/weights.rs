//! Log importance weights and the importance-weighted bound built on them.
//!
//! A row holds `ℓw_k = log p_θ(x, z_k) - log q(z_k; x)` for `K` proposal
//! draws and, optionally, the per-draw gradients `g_k = ∇_θ log p_θ(x, z_k)`.
//! The proposal is held fixed when differentiating, so the gradient of the
//! bound is the softmax(ℓw)-weighted average of the `g_k`.

use std::ops::Range;

use crate::error::{check_dim, Error, Result};
use crate::math::log_sum_exp;
use crate::model::{DataPoint, LatentVariableModel, ProposalDist};
use crate::rng::RandomStream;

#[derive(Debug, Clone, PartialEq)]
pub struct LogWeightRow {
    log_weights: Vec<f64>,
    /// Row-major `K x param_dim`; empty when gradients were not requested.
    grads: Vec<f64>,
    param_dim: usize,
}

impl LogWeightRow {
    pub fn from_parts(log_weights: Vec<f64>, grads: Vec<f64>, param_dim: usize) -> Result<Self> {
        if !grads.is_empty() {
            check_dim("gradient rows", log_weights.len() * param_dim, grads.len())?;
        }
        Ok(Self {
            log_weights,
            grads,
            param_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn has_gradients(&self) -> bool {
        !self.grads.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn grad(&self, k: usize) -> &[f64] {
        &self.grads[k * self.param_dim..(k + 1) * self.param_dim]
    }

    /// Row-major gradient block for samples in `range`.
    pub fn grads_range(&self, range: Range<usize>) -> &[f64] {
        &self.grads[range.start * self.param_dim..range.end * self.param_dim]
    }

    pub fn iwelbo(&self) -> f64 {
        iwelbo(&self.log_weights)
    }

    pub fn iwelbo_range(&self, range: Range<usize>) -> f64 {
        iwelbo(&self.log_weights[range])
    }

    pub fn iwelbo_gradient(&self) -> Vec<f64> {
        self.iwelbo_gradient_range(0..self.len())
    }

    pub fn iwelbo_gradient_range(&self, range: Range<usize>) -> Vec<f64> {
        let lw = &self.log_weights[range.clone()];
        iwelbo_gradient(lw, self.grads_range(range), self.param_dim)
    }
}

/// `K` i.i.d. draws from `q`, flattened row-major `K x dim(z)`.
pub fn sample_latents(q: &ProposalDist, k: usize, stream: &mut RandomStream) -> Vec<f64> {
    let d = q.dim();
    let mut out = vec![0.0; k * d];
    for chunk in out.chunks_exact_mut(d.max(1)).take(k) {
        q.sample_into(stream, chunk);
    }
    out
}

/// Evaluates log weights (and gradients) at given latent draws.
pub fn log_weight_row<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    q: &ProposalDist,
    latents: &[f64],
    with_grad: bool,
) -> Result<LogWeightRow> {
    let dz = model.latent_dim();
    let p = model.param_dim();
    check_dim("proposal", dz, q.dim())?;
    if dz == 0 || !latents.len().is_multiple_of(dz) {
        return Err(Error::InvalidArgument("latent buffer is not a whole number of draws".into()));
    }
    let k = latents.len() / dz;
    let mut log_weights = Vec::with_capacity(k);
    let mut grads = if with_grad { vec![0.0; k * p] } else { Vec::new() };
    for (i, z) in latents.chunks_exact(dz).enumerate() {
        let lj = if with_grad {
            model.log_joint_with_grad(x, z, theta, &mut grads[i * p..(i + 1) * p])?
        } else {
            model.log_joint(x, z, theta)?
        };
        let lw = lj - q.log_density(z);
        if !lw.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite log importance weight {lw} at z = {z:?}"
            )));
        }
        log_weights.push(lw);
    }
    LogWeightRow::from_parts(log_weights, grads, p)
}

/// Builds the proposal for `x`, draws `K` latents and evaluates the row.
pub fn draw_log_weights<M: LatentVariableModel + ?Sized>(
    model: &M,
    x: &DataPoint,
    theta: &[f64],
    k: usize,
    stream: &mut RandomStream,
    with_grad: bool,
) -> Result<LogWeightRow> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let q = model.build_proposal(x, theta)?;
    let latents = sample_latents(&q, k, stream);
    log_weight_row(model, x, theta, &q, &latents, with_grad)
}

/// `log((1/K) Σ_k exp(ℓw_k))`, max-shifted.
pub fn iwelbo(row: &[f64]) -> f64 {
    log_sum_exp(row) - (row.len() as f64).ln()
}

/// Softmax coefficients of the log weights.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|w| (w - lse).exp()).collect()
}

/// `Σ_k softmax(ℓw)_k g_k` for row-major `grads` (`K x dim`).
pub fn iwelbo_gradient(row: &[f64], grads: &[f64], dim: usize) -> Vec<f64> {
    debug_assert_eq!(grads.len(), row.len() * dim);
    let mut out = vec![0.0; dim];
    for (v, g) in softmax(row).iter().zip(grads.chunks_exact(dim.max(1))) {
        for (o, gi) in out.iter_mut().zip(g) {
            *o += v * gi;
        }
    }
    out
}
