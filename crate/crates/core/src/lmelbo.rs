//! Locally marginalized ELBO: a mean-field Gaussian posterior over selected
//! global parameters, with the local latents integrated out by coupled
//! multilevel Monte Carlo inside the expectation over `q(θ)`.
//!
//! `LMELBO = N · E_X E_{Θ~q} [log E_{Z~q(z;X,Θ)} p(X,Z|Θ)/q(Z;X,Θ)] - KL(q(θ) || p(θ))`.
//! Parameters not covered by the prior are ordinary point parameters.

use std::io::Write;

use crate::allocation::AllocationPlan;
use crate::error::{check_dim, Error, Result};
use crate::estimators::{mlmc_delta, mlmc_gradient_delta, EvidenceEstimate, GradientEstimate, LevelContribution};
use crate::math::{sigmoid, softplus, softplus_inv};
use crate::model::{Dataset, LatentVariableModel};
use crate::optimizer::{run_adam, FitConfig, TrainTrace};
use crate::rng::{derive_stream, fork, Purpose, RandomStream, StreamKey};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim("prior std", mean.len(), std.len())?;
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("prior std must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    /// `N(0, std²)` in every one of `dim` components.
    pub fn isotropic(dim: usize, std: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![std; dim])
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Diagonal Gaussian with `std = softplus(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVariational {
    pub mean: Vec<f64>,
    pub rho: Vec<f64>,
}

impl GaussianVariational {
    pub fn new(mean: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        check_dim("variational rho", mean.len(), rho.len())?;
        Ok(Self { mean, rho })
    }

    pub fn from_std(mean: Vec<f64>, std: &[f64]) -> Result<Self> {
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("variational std must be positive".into()));
        }
        Self::new(mean, std.iter().map(|s| softplus_inv(*s)).collect())
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|r| softplus(*r)).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_gaussian_diag(q: &GaussianVariational, p: &GaussianPrior) -> Result<f64> {
    check_dim("variational vs prior", p.dim(), q.dim())?;
    Ok(q.std()
        .iter()
        .zip(&q.mean)
        .zip(p.mean.iter().zip(&p.std))
        .map(|((sq, mq), (mp, sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// Gradient of [`kl_gaussian_diag`] with respect to `(mean, rho)`.
pub fn kl_gaussian_diag_grad(q: &GaussianVariational, p: &GaussianPrior) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("variational vs prior", p.dim(), q.dim())?;
    let mut d_mean = Vec::with_capacity(q.dim());
    let mut d_rho = Vec::with_capacity(q.dim());
    for i in 0..q.dim() {
        let sq = softplus(q.rho[i]);
        let vp = p.std[i] * p.std[i];
        d_mean.push((q.mean[i] - p.mean[i]) / vp);
        d_rho.push((sq / vp - 1.0 / sq) * sigmoid(q.rho[i]));
    }
    Ok((d_mean, d_rho))
}

/// Which model parameters are random, and their prior.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianSpec {
    /// Indices into `θ` of the parameters given a prior, in prior order.
    pub random: Vec<usize>,
    pub prior: GaussianPrior,
}

impl BayesianSpec {
    pub fn new(random: Vec<usize>, prior: GaussianPrior) -> Result<Self> {
        check_dim("random parameter indices", prior.dim(), random.len())?;
        let mut seen = random.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != random.len() {
            return Err(Error::InvalidArgument("random parameter indices repeat".into()));
        }
        Ok(Self { random, prior })
    }

    /// Random-effect logistic regression with `w_0, w ~ N(0, std²)` and `η` a point parameter.
    pub fn relogit(feature_dim: usize, prior_std: f64) -> Result<Self> {
        Self::new((1..feature_dim + 2).collect(), GaussianPrior::isotropic(feature_dim + 1, prior_std)?)
    }

    fn check<M: LatentVariableModel + ?Sized>(&self, model: &M) -> Result<()> {
        if let Some(&i) = self.random.iter().find(|i| **i >= model.param_dim()) {
            return Err(Error::InvalidArgument(format!(
                "random parameter index {i} out of range for dimension {}",
                model.param_dim()
            )));
        }
        Ok(())
    }

    fn point_indices(&self, param_dim: usize) -> Vec<usize> {
        (0..param_dim).filter(|i| !self.random.contains(i)).collect()
    }
}

/// Point parameters plus the variational posterior over the random ones.
#[derive(Debug, Clone, PartialEq)]
pub struct LmelboParams {
    /// Full-length `θ`; entries at random indices are ignored.
    pub point: Vec<f64>,
    pub q: GaussianVariational,
}

impl LmelboParams {
    /// Point parameters at zero and `q` centred on the prior mean with
    /// `init_std_scale` times the prior std.
    pub fn initial(param_dim: usize, spec: &BayesianSpec, init_std_scale: f64) -> Result<Self> {
        let std: Vec<f64> = spec.prior.std.iter().map(|s| s * init_std_scale).collect();
        Ok(Self {
            point: vec![0.0; param_dim],
            q: GaussianVariational::from_std(spec.prior.mean.clone(), &std)?,
        })
    }

    /// Unconstrained vector: point parameters, then `q` means, then `q` rhos.
    pub fn to_vec(&self, spec: &BayesianSpec) -> Vec<f64> {
        let mut v: Vec<f64> = spec.point_indices(self.point.len()).iter().map(|i| self.point[*i]).collect();
        v.extend(&self.q.mean);
        v.extend(&self.q.rho);
        v
    }

    pub fn from_vec(v: &[f64], param_dim: usize, spec: &BayesianSpec) -> Result<Self> {
        let point_idx = spec.point_indices(param_dim);
        let r = spec.random.len();
        check_dim("variational parameter vector", point_idx.len() + 2 * r, v.len())?;
        let mut point = vec![0.0; param_dim];
        for (j, i) in point_idx.iter().enumerate() {
            point[*i] = v[j];
        }
        let off = point_idx.len();
        Ok(Self {
            point,
            q: GaussianVariational::new(v[off..off + r].to_vec(), v[off + r..].to_vec())?,
        })
    }

    /// `Θ = point` with random entries `μ + σ ⊙ ε`; returns `(Θ, ε)`.
    fn sample_theta(&self, spec: &BayesianSpec, stream: &mut RandomStream) -> (Vec<f64>, Vec<f64>) {
        let mut theta = self.point.clone();
        let std = self.q.std();
        let eps: Vec<f64> = spec.random.iter().map(|_| stream.normal()).collect();
        for (j, i) in spec.random.iter().enumerate() {
            theta[*i] = self.q.mean[j] + std[j] * eps[j];
        }
        (theta, eps)
    }

    /// Posterior summary rows: random parameters with their prior, then
    /// point parameters with zero spread and no prior.
    pub fn write_summary_csv<W: Write>(&self, spec: &BayesianSpec, names: &[String], out: W) -> Result<()> {
        check_dim("parameter names", self.point.len(), names.len())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["param", "post_mean", "post_sd", "prior_mean", "prior_sd"])?;
        let std = self.q.std();
        for (j, i) in spec.random.iter().enumerate() {
            w.write_record([
                names[*i].clone(),
                self.q.mean[j].to_string(),
                std[j].to_string(),
                spec.prior.mean[j].to_string(),
                spec.prior.std[j].to_string(),
            ])?;
        }
        for i in spec.point_indices(self.point.len()) {
            w.write_record([names[i].clone(), self.point[i].to_string(), "0".into(), String::new(), String::new()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Data term `Σ_ℓ (N/M_ℓ) Σ_m Δ_ℓ(X_m, Θ_m)` and its gradient in the
/// unconstrained parameter vector, before the KL term.
fn data_term<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &BayesianSpec,
    params: &LmelboParams,
    plan: &AllocationPlan,
    seed: u64,
    with_grad: bool,
) -> Result<GradientEstimate> {
    use rayon::prelude::*;

    spec.check(model)?;
    check_dim("theta", model.param_dim(), params.point.len())?;
    check_dim("variational posterior", spec.random.len(), params.q.dim())?;
    plan.validate()?;
    let point_idx = spec.point_indices(model.param_dim());
    let r = spec.random.len();
    let flat_dim = point_idx.len() + 2 * r;
    let n_total = data.len() as f64;
    let mut value = 0.0;
    let mut vector = vec![0.0; flat_dim];
    let mut cost = 0;
    let mut breakdown = Vec::new();
    if data.is_empty() {
        return Ok(GradientEstimate {
            vector,
            value,
            inner_sample_cost: 0,
            level_breakdown: Some(breakdown),
        });
    }
    let dsig: Vec<f64> = params.q.rho.iter().map(|r| sigmoid(*r)).collect();
    for (level, &m) in plan.minibatch.iter().enumerate() {
        let draws = (0..m as u64)
            .into_par_iter()
            .map(|slot| {
                let mut ds = derive_stream(StreamKey::new(seed, Purpose::DataDraw, level as u32, slot));
                let idx = ds.index(data.len());
                let (theta, eps) = params.sample_theta(spec, &mut ds);
                let mut s = derive_stream(StreamKey::new(seed, Purpose::InnerSample, level as u32, slot));
                let x = &data.points[idx];
                let d = if with_grad {
                    mlmc_gradient_delta(model, x, &theta, level, &mut s)?
                } else {
                    mlmc_delta(model, x, &theta, level, &mut s)?
                };
                let flat = d.gradient.map(|g| {
                    let mut f: Vec<f64> = point_idx.iter().map(|i| g[*i]).collect();
                    f.extend(spec.random.iter().map(|i| g[*i]));
                    f.extend(spec.random.iter().enumerate().map(|(j, i)| g[*i] * eps[j] * dsig[j]));
                    f
                });
                Ok((d.delta, flat, d.cost))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = n_total / m as f64;
        let mut level_sum = 0.0;
        let mut level_cost = 0;
        for (delta, flat, c) in &draws {
            level_sum += delta;
            level_cost += c;
            if let Some(f) = flat {
                for (v, fi) in vector.iter_mut().zip(f) {
                    *v += scale * fi;
                }
            }
        }
        value += scale * level_sum;
        cost += level_cost;
        breakdown.push(LevelContribution {
            level,
            value: scale * level_sum,
            minibatch: m,
            cost: level_cost,
        });
    }
    Ok(GradientEstimate {
        vector,
        value,
        inner_sample_cost: cost,
        level_breakdown: Some(breakdown),
    })
}

/// MLMC estimate of the LMELBO. Each `(level, m)` draw samples its data
/// point and `Θ_m ~ q` jointly; the proposal is built at `Θ_m`.
pub fn lmelbo_mlmc_estimate<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &BayesianSpec,
    params: &LmelboParams,
    plan: &AllocationPlan,
    seed: u64,
) -> Result<EvidenceEstimate> {
    let g = data_term(model, data, spec, params, plan, seed, false)?;
    Ok(EvidenceEstimate {
        value: g.value - kl_gaussian_diag(&params.q, &spec.prior)?,
        inner_sample_cost: g.inner_sample_cost,
        level_breakdown: g.level_breakdown,
    })
}

/// Reparameterized gradient of the LMELBO in the layout of
/// [`LmelboParams::to_vec`].
pub fn lmelbo_gradient<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &BayesianSpec,
    params: &LmelboParams,
    plan: &AllocationPlan,
    seed: u64,
) -> Result<GradientEstimate> {
    let mut g = data_term(model, data, spec, params, plan, seed, true)?;
    let (d_mean, d_rho) = kl_gaussian_diag_grad(&params.q, &spec.prior)?;
    let off = g.vector.len() - 2 * spec.random.len();
    for (v, d) in g.vector[off..].iter_mut().zip(d_mean.iter().chain(&d_rho)) {
        *v -= d;
    }
    g.value -= kl_gaussian_diag(&params.q, &spec.prior)?;
    Ok(g)
}

/// Initial variational std as a fraction of the prior std.
pub const DEFAULT_INIT_STD_SCALE: f64 = 0.1;

/// Adam ascent on the LMELBO. `config.theta0`, when given, is the
/// unconstrained vector of [`LmelboParams::to_vec`]. The trace records that
/// vector; the fitted parameters are returned alongside.
pub fn fit_bayesian<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &BayesianSpec,
    plan: &AllocationPlan,
    config: &FitConfig,
) -> Result<(TrainTrace, LmelboParams)> {
    spec.check(model)?;
    let p = model.param_dim();
    let start = match &config.theta0 {
        Some(v) => LmelboParams::from_vec(v, p, spec)?,
        None => LmelboParams::initial(p, spec, DEFAULT_INIT_STD_SCALE)?,
    };
    let trace = run_adam(start.to_vec(spec), config, |iter, v| {
        let params = LmelboParams::from_vec(v, p, spec)?;
        let g = lmelbo_gradient(model, data, spec, &params, plan, fork(config.seed, iter as u64))?;
        Ok((g.vector, g.inner_sample_cost))
    })?;
    let last = trace.final_theta().expect("trace always holds the start point");
    let params = LmelboParams::from_vec(last, p, spec)?;
    Ok((trace, params))
}
