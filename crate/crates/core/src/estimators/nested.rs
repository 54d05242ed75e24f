use super::{check_theta, inner_stream, run_minibatch, sum_points, EvidenceEstimate, GradientEstimate, PointResult};
use crate::error::{Error, Result};
use crate::model::{Dataset, LatentVariableModel};
use crate::weights::draw_log_weights;

#[allow(clippy::too_many_arguments)]
fn nmc<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    m: usize,
    k: usize,
    n_total: f64,
    seed: u64,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, u64)> {
    check_theta(model, theta)?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let dz = model.latent_dim() as u64;
    let points = run_minibatch(data, m, seed, 0, |idx, slot, _| {
        let mut s = inner_stream(seed, 0, slot);
        let row = draw_log_weights(model, &data.points[idx], theta, k, &mut s, with_grad)?;
        Ok(PointResult {
            level: 0,
            value: row.iwelbo(),
            grad: with_grad.then(|| row.iwelbo_gradient()),
            cost: s.normals_drawn() / dz,
        })
    })?;
    let sum = sum_points(&points, model.param_dim());
    let scale = n_total / m as f64;
    Ok((
        scale * sum.value,
        sum.grad.iter().map(|g| scale * g).collect(),
        sum.cost,
    ))
}

/// Nested Monte Carlo: `(N/M) Σ_m log((1/K) Σ_k w_{m,k})` over `M` points
/// drawn uniformly with replacement.
pub fn nmc_evidence<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    m: usize,
    k: usize,
    n_total: f64,
    seed: u64,
) -> Result<EvidenceEstimate> {
    let (value, _, cost) = nmc(model, data, theta, m, k, n_total, seed, false)?;
    Ok(EvidenceEstimate {
        value,
        inner_sample_cost: cost,
        level_breakdown: None,
    })
}

/// Gradient of the nested Monte Carlo estimate, with the proposal held fixed.
pub fn nmc_gradient<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    m: usize,
    k: usize,
    n_total: f64,
    seed: u64,
) -> Result<GradientEstimate> {
    let (value, vector, cost) = nmc(model, data, theta, m, k, n_total, seed, true)?;
    Ok(GradientEstimate {
        vector,
        value,
        inner_sample_cost: cost,
        level_breakdown: None,
    })
}
