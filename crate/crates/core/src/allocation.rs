//! Pilot statistics per level and the variance/cost-optimal level plan.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::estimators::{mlmc_delta, mlmc_gradient_delta};
use crate::math::{linear_fit, mean_var};
use crate::model::{Dataset, LatentVariableModel};
use crate::rng::{derive_stream, Purpose, StreamKey};

/// Bounds applied to a fitted bias-decay slope.
pub const ALPHA_CLAMP: (f64, f64) = (0.5, 1.5);

/// Pilot summary for one level. Values are per data point (not scaled by `N`).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStat {
    pub level: usize,
    pub mean_delta: f64,
    pub var_delta: f64,
    /// Trace of the gradient-correction covariance, when gradients were sampled.
    pub var_grad_trace: Option<f64>,
    /// Euclidean norm of the mean gradient correction.
    pub grad_mean_norm: Option<f64>,
    pub cost: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub levels: Vec<LevelStat>,
}

impl LevelStats {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn max_level(&self) -> Option<usize> {
        self.levels.len().checked_sub(1)
    }

    pub fn has_gradients(&self) -> bool {
        self.levels.iter().all(|l| l.var_grad_trace.is_some())
    }

    /// Variance used for allocation: scalar, or gradient trace.
    fn variance(&self, level: usize, use_grad: bool) -> Result<f64> {
        let s = &self.levels[level];
        if use_grad {
            s.var_grad_trace.ok_or_else(|| {
                Error::InvalidArgument("pilot statistics carry no gradient variances".into())
            })
        } else {
            Ok(s.var_delta)
        }
    }

    fn bias_magnitude(&self, level: usize, use_grad: bool) -> Option<f64> {
        let s = &self.levels[level];
        if use_grad {
            s.grad_mean_norm
        } else {
            Some(s.mean_delta.abs())
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "mean_delta", "var_delta", "var_grad_trace", "cost", "reps"])?;
        for s in &self.levels {
            w.write_record([
                s.level.to_string(),
                s.mean_delta.to_string(),
                s.var_delta.to_string(),
                s.var_grad_trace.map(|v| v.to_string()).unwrap_or_default(),
                s.cost.to_string(),
                s.reps.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let expected = ["level", "mean_delta", "var_delta", "var_grad_trace", "cost", "reps"];
        if r.headers()?.iter().ne(expected.iter().copied()) {
            return Err(Error::Parse(format!("level stats header must be {}", expected.join(","))));
        }
        let num = |field: &str| -> Result<f64> {
            field.parse().map_err(|_| Error::Parse(format!("bad number {field:?}")))
        };
        let mut levels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let level = num(&rec[0])? as usize;
            if level != levels.len() {
                return Err(Error::Parse("levels must start at 0 and be consecutive".into()));
            }
            levels.push(LevelStat {
                level,
                mean_delta: num(&rec[1])?,
                var_delta: num(&rec[2])?,
                var_grad_trace: if rec[3].is_empty() { None } else { Some(num(&rec[3])?) },
                grad_mean_norm: None,
                cost: num(&rec[4])?,
                reps: num(&rec[5])? as usize,
            });
        }
        Ok(Self { levels })
    }
}

/// Runs `reps` independent corrections at each level `0..=max_level`.
///
/// Each replicate draws its own data point uniformly from `data`.
pub fn pilot_levels<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    max_level: usize,
    reps: usize,
    seed: u64,
    with_grad: bool,
) -> Result<LevelStats> {
    use rayon::prelude::*;

    if reps < 2 {
        return Err(Error::InvalidArgument("pilot needs at least 2 reps per level".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("pilot needs a non-empty dataset".into()));
    }
    crate::error::check_dim("theta", model.param_dim(), theta.len())?;
    let p = model.param_dim();
    let mut levels = Vec::with_capacity(max_level + 1);
    for level in 0..=max_level {
        let draws = (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                let key = |purpose| StreamKey::new(seed, purpose, level as u32, r);
                let idx = derive_stream(key(Purpose::DataDraw)).index(data.len());
                let mut s = derive_stream(key(Purpose::InnerSample));
                let x = &data.points[idx];
                if with_grad {
                    mlmc_gradient_delta(model, x, theta, level, &mut s)
                } else {
                    mlmc_delta(model, x, theta, level, &mut s)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<f64> = draws.iter().map(|d| d.delta).collect();
        let (mean_delta, var_delta) = mean_var(&values);
        let (var_grad_trace, grad_mean_norm) = if with_grad {
            let mut trace = 0.0;
            let mut norm2 = 0.0;
            let mut col = vec![0.0; reps];
            for i in 0..p {
                for (c, d) in col.iter_mut().zip(&draws) {
                    *c = d.gradient.as_ref().map_or(0.0, |g| g[i]);
                }
                let (m, v) = mean_var(&col);
                trace += v;
                norm2 += m * m;
            }
            (Some(trace), Some(norm2.sqrt()))
        } else {
            (None, None)
        };
        levels.push(LevelStat {
            level,
            mean_delta,
            var_delta,
            var_grad_trace,
            grad_mean_norm,
            cost: (level as f64).exp2(),
            reps,
        });
    }
    Ok(LevelStats { levels })
}

/// Maximum level and per-level mini-batch sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub max_level: usize,
    pub minibatch: Vec<usize>,
    /// Target root-MSE when the plan came from [`optimal_plan`].
    pub epsilon: Option<f64>,
    /// `Σ V_ℓ / M_ℓ` under the pilot variances, when known.
    pub predicted_variance: Option<f64>,
    /// Pilot variances the plan was built from (empty for hand-made plans).
    pub variances: Vec<f64>,
}

impl AllocationPlan {
    /// A plan with the given `M_0..M_L` and no pilot information.
    pub fn from_minibatch(minibatch: Vec<usize>) -> Result<Self> {
        let plan = Self {
            max_level: minibatch.len().saturating_sub(1),
            minibatch,
            epsilon: None,
            predicted_variance: None,
            variances: Vec::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch.len() != self.max_level + 1 {
            return Err(Error::InvalidArgument(format!(
                "plan for L={} needs {} mini-batch sizes, got {}",
                self.max_level,
                self.max_level + 1,
                self.minibatch.len()
            )));
        }
        if self.minibatch.contains(&0) {
            return Err(Error::InvalidArgument("every level needs M >= 1".into()));
        }
        Ok(())
    }

    /// Inner samples per evaluation: `Σ_ℓ M_ℓ 2^ℓ`.
    pub fn cost(&self) -> u64 {
        self.minibatch
            .iter()
            .enumerate()
            .map(|(l, m)| (*m as u64) << l)
            .sum()
    }
}

/// Fitted bias model `|E Δ_ℓ| ≈ c·2^{-αℓ}` over levels `ℓ ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasFit {
    pub alpha: f64,
    pub c: f64,
}

impl BiasFit {
    /// `c₁` such that the truncation bias beyond level `L` is `c₁·2^{-αL}`.
    pub fn c1(&self) -> f64 {
        let r = (-self.alpha).exp2();
        self.c * r / (1.0 - r)
    }
}

/// Least-squares fit of `log₂|mean Δ_ℓ|` on `ℓ` for `ℓ ≥ 1`. With `alpha`
/// given only the intercept is fitted; otherwise the fitted slope is clamped
/// to [`ALPHA_CLAMP`]. Returns `None` if every usable mean is zero.
pub fn fit_bias(stats: &LevelStats, alpha: Option<f64>, use_grad: bool) -> Option<BiasFit> {
    let (ls, ys): (Vec<f64>, Vec<f64>) = (1..stats.len())
        .filter_map(|l| {
            let m = stats.bias_magnitude(l, use_grad)?;
            (m > 0.0 && m.is_finite()).then(|| (l as f64, m.log2()))
        })
        .unzip();
    if ls.is_empty() {
        return None;
    }
    let alpha = match alpha {
        Some(a) => a,
        None if ls.len() >= 2 => (-linear_fit(&ls, &ys).0).clamp(ALPHA_CLAMP.0, ALPHA_CLAMP.1),
        None => 1.0,
    };
    let intercept = ls.iter().zip(&ys).map(|(l, y)| y + alpha * l).sum::<f64>() / ls.len() as f64;
    Some(BiasFit {
        alpha,
        c: intercept.exp2(),
    })
}

/// Mini-batch sizes `M_ℓ = ⌈2ε⁻²√(V_ℓ/C_ℓ) Σ_ℓ' √(C_ℓ' V_ℓ')⌉` for levels `0..=L`.
fn sizes_for_epsilon(variances: &[f64], epsilon: f64) -> Vec<usize> {
    let total: f64 = variances
        .iter()
        .enumerate()
        .map(|(l, v)| ((l as f64).exp2() * v).sqrt())
        .sum();
    variances
        .iter()
        .enumerate()
        .map(|(l, v)| {
            let m = (2.0 / (epsilon * epsilon) * (v / (l as f64).exp2()).sqrt() * total).ceil();
            (m as usize).max(1)
        })
        .collect()
}

fn predicted_variance(variances: &[f64], minibatch: &[usize]) -> f64 {
    variances.iter().zip(minibatch).map(|(v, m)| v / *m as f64).sum()
}

/// Plan meeting root-MSE `epsilon`: half the squared budget goes to bias
/// (which fixes `L`) and half to variance (which fixes the `M_ℓ`).
pub fn optimal_plan(
    stats: &LevelStats,
    epsilon: f64,
    alpha: Option<f64>,
    use_grad: bool,
) -> Result<AllocationPlan> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if stats.is_empty() {
        return Err(Error::InsufficientPilot {
            level: 0,
            available: 0,
        });
    }
    let max_level = if stats.len() == 1 {
        0
    } else {
        match fit_bias(stats, alpha, use_grad) {
            None => 0,
            Some(fit) => {
                let arg = std::f64::consts::SQRT_2 * fit.c1() / epsilon;
                (arg.log2() / fit.alpha).ceil().max(0.0) as usize
            }
        }
    };
    if max_level >= stats.len() {
        return Err(Error::InsufficientPilot {
            level: max_level,
            available: stats.len(),
        });
    }
    let variances = (0..=max_level)
        .map(|l| stats.variance(l, use_grad))
        .collect::<Result<Vec<_>>>()?;
    let minibatch = sizes_for_epsilon(&variances, epsilon);
    let pv = predicted_variance(&variances, &minibatch);
    debug_assert!(pv <= 0.5 * epsilon * epsilon * (1.0 + 1e-12));
    Ok(AllocationPlan {
        max_level,
        minibatch,
        epsilon: Some(epsilon),
        predicted_variance: Some(pv),
        variances,
    })
}

/// Unnormalized optimal shares `√(V_ℓ / 2^ℓ)` for levels `0..=level`.
pub fn level_ratios(stats: &LevelStats, level: usize, use_grad: bool) -> Result<Vec<f64>> {
    if level >= stats.len() {
        return Err(Error::InsufficientPilot {
            level,
            available: stats.len(),
        });
    }
    (0..=level)
        .map(|l| Ok((stats.variance(l, use_grad)? / (l as f64).exp2()).sqrt()))
        .collect()
}

/// Scales shares `ratios` so that `M_ℓ = max(1, round(s·r_ℓ))` uses as much
/// of `budget` inner samples as possible without exceeding it.
pub fn scale_plan_to_budget(ratios: &[f64], budget: u64) -> Result<AllocationPlan> {
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("no levels to allocate".into()));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::InvalidArgument("level shares must be finite and non-negative".into()));
    }
    let sizes = |s: f64| -> Vec<usize> {
        ratios.iter().map(|r| ((s * r).round() as usize).max(1)).collect()
    };
    let cost = |m: &[usize]| -> u64 { m.iter().enumerate().map(|(l, m)| (*m as u64) << l).sum() };
    let floor = cost(&sizes(0.0));
    if floor > budget {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} is below the minimum {floor} for L={}",
            ratios.len() - 1
        )));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    if ratios.iter().any(|r| *r > 0.0) {
        while cost(&sizes(hi)) <= budget {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cost(&sizes(mid)) <= budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    AllocationPlan::from_minibatch(sizes(lo))
}

/// Pilot-shaped plan at a fixed `L`, scaled to `budget` inner samples.
pub fn plan_for_level(
    stats: &LevelStats,
    level: usize,
    budget: u64,
    use_grad: bool,
) -> Result<AllocationPlan> {
    let ratios = level_ratios(stats, level, use_grad)?;
    let mut plan = scale_plan_to_budget(&ratios, budget)?;
    plan.variances = (0..=level)
        .map(|l| stats.variance(l, use_grad))
        .collect::<Result<_>>()?;
    plan.predicted_variance = Some(predicted_variance(&plan.variances, &plan.minibatch));
    Ok(plan)
}
