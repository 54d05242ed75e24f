//! Adam ascent on a stochastic gradient, with a cost-aligned training trace.

use std::io::Write;
use std::time::Instant;

use crate::error::{check_dim, Error, Result};
use crate::estimators::Estimator;
use crate::model::{Dataset, LatentVariableModel};
use crate::rng::fork;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Returns the ascent update `+lr·m̂/(√v̂+ε)`.
pub fn adam_step(state: &mut AdamState, grad: &[f64]) -> Result<Vec<f64>> {
    check_dim("gradient", state.m.len(), grad.len())?;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    Ok(state
        .m
        .iter_mut()
        .zip(state.v.iter_mut())
        .zip(grad)
        .map(|((m, v), g)| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            lr * (*m / c1) / ((*v / c2).sqrt() + eps)
        })
        .collect())
}

/// Sum of squared errors against a reference parameter.
pub fn squared_error(theta: &[f64], reference: &[f64]) -> f64 {
    theta.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iter: usize,
    /// Inner samples consumed up to and including this iteration.
    pub cost: u64,
    pub wall_ms: f64,
    pub mse: Option<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
}

impl TrainTrace {
    pub fn final_theta(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.theta.as_slice())
    }

    pub fn total_cost(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cost)
    }

    /// Writes `iter,cost,wall_ms,mse,theta_0,...`. Wall time is written as
    /// `0` unless `with_wall_time`, so that repeated runs are byte-identical.
    pub fn write_csv<W: Write>(&self, out: W, with_wall_time: bool) -> Result<()> {
        let dim = self.records.first().map_or(0, |r| r.theta.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["iter", "cost", "wall_ms", "mse"].map(String::from).to_vec();
        header.extend((0..dim).map(|i| format!("theta_{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.iter.to_string(),
                r.cost.to_string(),
                if with_wall_time { r.wall_ms.to_string() } else { "0".into() },
                r.mse.map(|m| m.to_string()).unwrap_or_default(),
            ];
            row.extend(r.theta.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    /// Record every this many iterations (the first and last are always kept).
    pub record_every: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Starting point; zeros when `None`.
    pub theta0: Option<Vec<f64>>,
    /// Ground truth for the `mse` column.
    pub theta_star: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            record_every: 10,
            seed: 0,
            adam: AdamConfig::default(),
            theta0: None,
            theta_star: None,
        }
    }
}

/// Generic Adam ascent loop. `grad_fn(iter, theta)` returns a gradient and
/// the inner-sample cost it consumed.
pub fn run_adam<F>(theta0: Vec<f64>, config: &FitConfig, mut grad_fn: F) -> Result<TrainTrace>
where
    F: FnMut(usize, &[f64]) -> Result<(Vec<f64>, u64)>,
{
    if let Some(star) = &config.theta_star {
        check_dim("theta_star", theta0.len(), star.len())?;
    }
    let every = config.record_every.max(1);
    let start = Instant::now();
    let mse = |theta: &[f64]| config.theta_star.as_ref().map(|s| squared_error(theta, s));
    let mut theta = theta0;
    let mut state = AdamState::new(theta.len(), config.adam);
    let mut cost = 0u64;
    let mut trace = TrainTrace {
        records: vec![TrainRecord {
            iter: 0,
            cost: 0,
            wall_ms: 0.0,
            mse: mse(&theta),
            theta: theta.clone(),
        }],
    };
    for iter in 1..=config.iters {
        let (grad, c) = grad_fn(iter, &theta)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                iter,
                detail: format!("component {i} is {} at theta = {theta:?}", grad[i]),
            });
        }
        let update = adam_step(&mut state, &grad)?;
        theta.iter_mut().zip(&update).for_each(|(t, u)| *t += u);
        cost += c;
        if iter % every == 0 || iter == config.iters {
            trace.records.push(TrainRecord {
                iter,
                cost,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                mse: mse(&theta),
                theta: theta.clone(),
            });
        }
    }
    Ok(trace)
}

/// Maximizes the evidence estimate over `θ` using `estimator`'s gradient on
/// the whole dataset (`N = data.len()`).
pub fn fit<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    estimator: &Estimator,
    config: &FitConfig,
) -> Result<TrainTrace> {
    let theta0 = config
        .theta0
        .clone()
        .unwrap_or_else(|| vec![0.0; model.param_dim()]);
    check_dim("theta0", model.param_dim(), theta0.len())?;
    let n_total = data.len() as f64;
    run_adam(theta0, config, |iter, theta| {
        let g = estimator.gradient(model, data, theta, n_total, fork(config.seed, iter as u64))?;
        Ok((g.vector, g.inner_sample_cost))
    })
}
