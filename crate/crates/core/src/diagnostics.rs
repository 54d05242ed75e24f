//! Empirical decay rates, variance×cost efficiency and comparison tables.

use std::io::Write;

use rayon::prelude::*;

use crate::allocation::{pilot_levels, plan_for_level, LevelStats};
use crate::error::{Error, Result};
use crate::estimators::{Estimator, LevelWeights, SumoTruncation};
use crate::math::{harmonic, linear_fit, mean_var};
use crate::model::{Dataset, LatentVariableModel};
use crate::optimizer::squared_error;
use crate::rng::fork;

/// A fitted geometric decay rate, or a flag that the quantity vanished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Finite(f64),
    /// Some level had an exactly zero mean or variance.
    Infinite,
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rate::Finite(r) => write!(f, "{r}"),
            Rate::Infinite => write!(f, "inf"),
        }
    }
}

impl Rate {
    pub fn value(&self) -> f64 {
        match self {
            Rate::Finite(r) => *r,
            Rate::Infinite => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub level: usize,
    pub mean: f64,
    pub var: f64,
    pub grad_var_trace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    /// Bias rate from `|mean Δ_ℓ|`.
    pub alpha: Rate,
    /// Variance rate from `V[Δ_ℓ]`.
    pub beta: Rate,
    /// Rates for the gradient corrections (norm of the mean, covariance trace).
    pub grad_alpha: Option<Rate>,
    pub grad_beta: Option<Rate>,
    pub rows: Vec<DecayRow>,
}

impl DecayReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "mean", "var", "grad_var_trace"])?;
        for r in &self.rows {
            w.write_record([
                r.level.to_string(),
                r.mean.to_string(),
                r.var.to_string(),
                r.grad_var_trace.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `-slope` of `log₂ y_ℓ` against `ℓ` over `ℓ ≥ 1`.
fn decay_rate(ys: impl Iterator<Item = f64>) -> Rate {
    let (ls, logs): (Vec<f64>, Vec<f64>) = ys
        .enumerate()
        .skip(1)
        .map(|(l, y)| (l as f64, y.abs().log2()))
        .unzip();
    if logs.iter().any(|y| !y.is_finite()) {
        return Rate::Infinite;
    }
    Rate::Finite(-linear_fit(&ls, &logs).0)
}

pub fn decay_report(stats: &LevelStats) -> Result<DecayReport> {
    if stats.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "decay fit needs at least 4 levels, got {}",
            stats.len()
        )));
    }
    let lv = &stats.levels;
    let grad_alpha = lv
        .iter()
        .map(|s| s.grad_mean_norm)
        .collect::<Option<Vec<_>>>()
        .map(|v| decay_rate(v.into_iter()));
    let grad_beta = lv
        .iter()
        .map(|s| s.var_grad_trace)
        .collect::<Option<Vec<_>>>()
        .map(|v| decay_rate(v.into_iter()));
    Ok(DecayReport {
        alpha: decay_rate(lv.iter().map(|s| s.mean_delta)),
        beta: decay_rate(lv.iter().map(|s| s.var_delta)),
        grad_alpha,
        grad_beta,
        rows: lv
            .iter()
            .map(|s| DecayRow {
                level: s.level,
                mean: s.mean_delta,
                var: s.var_delta,
                grad_var_trace: s.var_grad_trace,
            })
            .collect(),
    })
}

/// Estimator families compared at a matched bias level `L` (target `L_{2^L}`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Nmc,
    Mlmc,
    RandomizedMlmc,
    Sumo,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Nmc,
        EstimatorKind::Mlmc,
        EstimatorKind::RandomizedMlmc,
        EstimatorKind::Sumo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Nmc => "nmc",
            EstimatorKind::Mlmc => "mlmc",
            EstimatorKind::RandomizedMlmc => "rmlmc",
            EstimatorKind::Sumo => "sumo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyConfig {
    pub levels: Vec<usize>,
    pub kinds: Vec<EstimatorKind>,
    /// Replicates per (estimator, level) cell.
    pub reps: usize,
    /// Inner samples per estimate.
    pub budget: u64,
    /// Pilot replicates per level for the MLMC allocation.
    pub pilot_reps: usize,
    pub seed: u64,
}

impl Default for EfficiencyConfig {
    fn default() -> Self {
        Self {
            levels: (3..=7).collect(),
            kinds: EstimatorKind::ALL.to_vec(),
            reps: 200,
            budget: 4096,
            pilot_reps: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRow {
    pub estimator: String,
    pub level: usize,
    /// Trace of the empirical covariance of the gradient estimate.
    pub var: f64,
    /// Mean inner samples per estimate.
    pub cost: f64,
    pub var_x_cost: f64,
}

/// Builds the estimator of `kind` targeting `L_{2^level}` with roughly
/// `budget` inner samples per call. `stats` shapes the MLMC plan.
pub fn matched_estimator(
    kind: EstimatorKind,
    level: usize,
    budget: u64,
    stats: Option<&LevelStats>,
) -> Result<Estimator> {
    let k = 1usize << level;
    let per_call = |expected: f64| ((budget as f64 / expected).round() as usize).max(1);
    Ok(match kind {
        EstimatorKind::Nmc => Estimator::Nmc {
            k,
            m: per_call(k as f64),
        },
        EstimatorKind::Mlmc => {
            let stats = stats.ok_or_else(|| {
                Error::InvalidArgument("MLMC allocation needs pilot statistics".into())
            })?;
            Estimator::Mlmc {
                plan: plan_for_level(stats, level, budget, stats.has_gradients())?,
            }
        }
        EstimatorKind::RandomizedMlmc => {
            let weights = LevelWeights::geometric(2.0, level)?;
            let m = per_call(weights.expected_cost());
            Estimator::RandomizedMlmc { weights, m }
        }
        EstimatorKind::Sumo => Estimator::Sumo {
            truncation: SumoTruncation::hard(k)?,
            m: per_call(harmonic(k)),
        },
    })
}

/// Per-point (`N = 1`) gradient variance and cost for each estimator at each
/// level, replicated `reps` times at fixed `θ`.
pub fn efficiency_report<M: LatentVariableModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    config: &EfficiencyConfig,
) -> Result<Vec<EfficiencyRow>> {
    if config.reps < 2 {
        return Err(Error::InvalidArgument("efficiency needs at least 2 reps".into()));
    }
    let max_level = config.levels.iter().copied().max().unwrap_or(0);
    let stats = if config.kinds.contains(&EstimatorKind::Mlmc) {
        Some(pilot_levels(
            model,
            data,
            theta,
            max_level,
            config.pilot_reps,
            fork(config.seed, u64::MAX),
            true,
        )?)
    } else {
        None
    };
    let p = model.param_dim();
    let mut rows = Vec::new();
    for (ki, kind) in config.kinds.iter().enumerate() {
        for &level in &config.levels {
            let est = matched_estimator(*kind, level, config.budget, stats.as_ref())?;
            let cell_seed = fork(fork(config.seed, ki as u64), level as u64);
            let draws = (0..config.reps as u64)
                .into_par_iter()
                .map(|r| est.gradient(model, data, theta, 1.0, fork(cell_seed, r)))
                .collect::<Result<Vec<_>>>()?;
            let mut var = 0.0;
            let mut col = vec![0.0; draws.len()];
            for i in 0..p {
                for (c, d) in col.iter_mut().zip(&draws) {
                    *c = d.vector[i];
                }
                var += mean_var(&col).1;
            }
            let cost = draws.iter().map(|d| d.inner_sample_cost as f64).sum::<f64>() / draws.len() as f64;
            rows.push(EfficiencyRow {
                estimator: kind.name().to_string(),
                level,
                var,
                cost,
                var_x_cost: var * cost,
            });
        }
    }
    Ok(rows)
}

pub fn write_efficiency_csv<W: Write>(rows: &[EfficiencyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "L", "var", "cost", "var_x_cost"])?;
    for r in rows {
        w.write_record([
            r.estimator.clone(),
            r.level.to_string(),
            r.var.to_string(),
            r.cost.to_string(),
            r.var_x_cost.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Final parameters of repeated fits with one estimator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FitGroup {
    pub label: String,
    pub thetas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Mean over repetitions of `Σ_i (θ̂_i - θ*_i)²`.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub param_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Per-estimator mean and standard deviation of each parameter, and MSE,
/// preceded by a ground-truth row.
pub fn comparison_table(
    groups: &[FitGroup],
    theta_star: &[f64],
    param_names: &[String],
) -> Result<ComparisonTable> {
    let p = theta_star.len();
    crate::error::check_dim("parameter names", p, param_names.len())?;
    let mut rows = vec![ComparisonRow {
        label: "Ground Truth".into(),
        mean: theta_star.to_vec(),
        sd: vec![0.0; p],
        mse: 0.0,
    }];
    for g in groups {
        if g.thetas.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{} has {} repetitions; at least 2 are needed",
                g.label,
                g.thetas.len()
            )));
        }
        for t in &g.thetas {
            crate::error::check_dim("fitted theta", p, t.len())?;
        }
        let (mean, sd) = (0..p)
            .map(|i| {
                let col: Vec<f64> = g.thetas.iter().map(|t| t[i]).collect();
                let (m, v) = mean_var(&col);
                (m, v.sqrt())
            })
            .unzip();
        let mse = g.thetas.iter().map(|t| squared_error(t, theta_star)).sum::<f64>() / g.thetas.len() as f64;
        rows.push(ComparisonRow {
            label: g.label.clone(),
            mean,
            sd,
            mse,
        });
    }
    Ok(ComparisonTable {
        param_names: param_names.to_vec(),
        rows,
    })
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["estimator".to_string()];
        for n in &self.param_names {
            header.push(format!("{n}_mean"));
            header.push(format!("{n}_sd"));
        }
        header.push("mse".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            for (m, s) in r.mean.iter().zip(&r.sd) {
                rec.push(m.to_string());
                rec.push(s.to_string());
            }
            rec.push(r.mse.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::LevelStat;
    use crate::models::*;

    fn stats(mean: impl Fn(usize) -> f64, var: impl Fn(usize) -> f64) -> LevelStats {
        LevelStats {
            levels: (0..8)
                .map(|l| LevelStat {
                    level: l,
                    mean_delta: mean(l),
                    var_delta: var(l),
                    var_grad_trace: None,
                    grad_mean_norm: None,
                    cost: (l as f64).exp2(),
                    reps: 10,
                })
                .collect(),
        }
    }

    #[test]
    fn exact_log_linear_input_gives_exact_slopes() {
        let s = stats(|l| (-(l as f64)).exp2(), |l| 4f64.powi(-(l as i32)));
        let r = decay_report(&s).unwrap();
        assert!((r.alpha.value() - 1.0).abs() < 1e-12);
        assert!((r.beta.value() - 2.0).abs() < 1e-12);
        assert!(r.grad_alpha.is_none());
    }

    #[test]
    fn vanishing_corrections_flag_infinite_rate() {
        let s = stats(|l| if l == 0 { -1.0 } else { 0.0 }, |l| if l == 0 { 1.0 } else { 0.0 });
        let r = decay_report(&s).unwrap();
        assert_eq!(r.alpha, Rate::Infinite);
        assert_eq!(r.beta, Rate::Infinite);
        let short = LevelStats {
            levels: s.levels[..3].to_vec(),
        };
        assert!(decay_report(&short).is_err());
    }

    #[test]
    fn ground_truth_row_and_zero_spread() {
        let names: Vec<String> = ["eta", "w0", "w1", "w2", "w3"].map(String::from).to_vec();
        let g = FitGroup {
            label: "NMC (K=1)".into(),
            thetas: vec![vec![0.5, 0.0, 0.2, 0.5, 0.7]; 3],
        };
        let t = comparison_table(&[g], &RELOGIT_THETA_STAR, &names).unwrap();
        let gt = t.row("Ground Truth").unwrap();
        assert_eq!(gt.mean, RELOGIT_THETA_STAR.to_vec());
        assert_eq!(gt.mse, 0.0);
        let r = t.row("NMC (K=1)").unwrap();
        assert!(r.sd.iter().all(|s| *s == 0.0));
        assert!((r.mse - (0.25 + 0.0025 + 0.0025)).abs() < 1e-12);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("estimator,eta_mean,eta_sd,w0_mean,w0_sd,"));
        assert!(text.contains("Ground Truth,1,0,0,0,0.25,0,0.5,0,0.75,0,0\n"));
        let single = FitGroup {
            label: "x".into(),
            thetas: vec![vec![0.0; 5]],
        };
        assert!(comparison_table(&[single], &RELOGIT_THETA_STAR, &names).is_err());
    }

    #[test]
    fn efficiency_costs_are_reported_costs() {
        let data = generate_relogit_data(200, 2, &RELOGIT_THETA_STAR, 1).unwrap().dataset;
        let m = RandomEffectLogisticModel::new(3, 2);
        let cfg = EfficiencyConfig {
            levels: vec![2, 3],
            reps: 20,
            budget: 64,
            pilot_reps: 200,
            ..EfficiencyConfig::default()
        };
        let rows = efficiency_report(&m, &data, &RELOGIT_THETA_STAR, &cfg).unwrap();
        assert_eq!(rows.len(), 8);
        let nmc = rows.iter().find(|r| r.estimator == "nmc" && r.level == 3).unwrap();
        assert_eq!(nmc.cost, 64.0);
        let mlmc = rows.iter().find(|r| r.estimator == "mlmc" && r.level == 3).unwrap();
        assert!(mlmc.cost <= 64.0);
        assert!(rows.iter().all(|r| r.var > 0.0 && (r.var_x_cost - r.var * r.cost).abs() < 1e-12 * r.var_x_cost));
    }
}
