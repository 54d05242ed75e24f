//! Experiment runners behind the `mlmc-evidence` command line.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Deserialize;

use mlmc_evidence::allocation::{pilot_levels, plan_for_level, LevelStats};
use mlmc_evidence::diagnostics::{comparison_table, ComparisonTable, FitGroup};
use mlmc_evidence::estimators::{Estimator, LevelWeights, SumoTruncation};
use mlmc_evidence::math::harmonic;
use mlmc_evidence::models::*;
use mlmc_evidence::optimizer::{fit, AdamConfig, FitConfig};
use mlmc_evidence::rng::fork;
use mlmc_evidence::{Dataset, LatentVariableModel};

/// Default per-step inner-sample budget for the training loop.
pub const DEFAULT_BUDGET: u64 = 256;
/// Default pilot replicates per level used to shape MLMC plans for training.
pub const DEFAULT_FIT_PILOT_REPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Relogit,
    Conjugate,
}

impl ModelKind {
    pub fn default_theta_star(&self) -> Vec<f64> {
        match self {
            ModelKind::Relogit => RELOGIT_THETA_STAR.to_vec(),
            ModelKind::Conjugate => vec![0.0, 0.0, 0.0],
        }
    }
}

/// A model chosen at run time.
pub enum AnyModel {
    Relogit(RandomEffectLogisticModel),
    Conjugate(ConjugateGaussianModel),
}

impl AnyModel {
    /// Relogit for datasets with features, otherwise the conjugate model
    /// with its exact posterior as proposal.
    pub fn for_data(data: &Dataset, kind: Option<ModelKind>) -> Result<Self> {
        let kind = kind.unwrap_or(if data.feature_dim > 0 {
            ModelKind::Relogit
        } else {
            ModelKind::Conjugate
        });
        Ok(match kind {
            ModelKind::Relogit => {
                if data.feature_dim == 0 {
                    bail!("the relogit model needs a dataset with feature columns");
                }
                AnyModel::Relogit(RandomEffectLogisticModel::new(data.feature_dim, data.obs_per_point))
            }
            ModelKind::Conjugate => {
                if data.feature_dim != 0 || data.obs_per_point != 1 {
                    bail!("the conjugate model needs a dataset with one response and no features");
                }
                AnyModel::Conjugate(ConjugateGaussianModel::exact())
            }
        })
    }

    pub fn as_dyn(&self) -> &dyn LatentVariableModel {
        match self {
            AnyModel::Relogit(m) => m,
            AnyModel::Conjugate(m) => m,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Relogit(_) => ModelKind::Relogit,
            AnyModel::Conjugate(_) => ModelKind::Conjugate,
        }
    }
}

/// Comma-separated list of reals.
pub fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?} in {s:?}")))
        .collect()
}

/// Comma-separated levels, or an inclusive range `a..b`.
pub fn parse_levels(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().with_context(|| format!("bad level range {s:?}"))?;
        let b: usize = b.trim().parse().with_context(|| format!("bad level range {s:?}"))?;
        if a > b {
            bail!("empty level range {s:?}");
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad level {t:?}")))
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_dataset_csv(std::io::BufReader::new(f)).with_context(|| format!("cannot read {}", path.display()))
}

pub fn generate(kind: ModelKind, n: usize, t: usize, theta_star: &[f64], seed: u64) -> Result<Dataset> {
    Ok(match kind {
        ModelKind::Relogit => generate_relogit_data(n, t, theta_star, seed)?.dataset,
        ModelKind::Conjugate => generate_conjugate_data(n, theta_star, seed)?.dataset,
    })
}

/// Estimator family and its size parameter, e.g. `nmc:8` or `mlmc:5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorSpec {
    Nmc { k: usize },
    Mlmc { level: usize },
    RandomizedMlmc { level: usize },
    Sumo { k_max: usize },
    SumoSoft { knee: usize },
    Jackknife { k: usize },
}

impl std::str::FromStr for EstimatorSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| anyhow!("estimator {s:?} must look like name:size, e.g. mlmc:5"))?;
        let n: usize = arg.trim().parse().with_context(|| format!("bad size in estimator {s:?}"))?;
        Ok(match name.trim() {
            "nmc" => EstimatorSpec::Nmc { k: n },
            "mlmc" => EstimatorSpec::Mlmc { level: n },
            "rmlmc" => EstimatorSpec::RandomizedMlmc { level: n },
            "sumo" => EstimatorSpec::Sumo { k_max: n },
            "sumo-soft" => EstimatorSpec::SumoSoft { knee: n },
            "jackknife" => EstimatorSpec::Jackknife { k: n },
            other => bail!("unknown estimator {other:?} (nmc, mlmc, rmlmc, sumo, sumo-soft, jackknife)"),
        })
    }
}

/// Gradient-variance pilot at `theta` used to shape MLMC plans.
pub fn fit_pilot(
    model: &dyn LatentVariableModel,
    data: &Dataset,
    theta: &[f64],
    max_level: usize,
    reps: usize,
    seed: u64,
) -> Result<LevelStats> {
    Ok(pilot_levels(model, data, theta, max_level, reps, seed, true)?)
}

/// Concrete estimator spending about `budget` inner samples per gradient.
pub fn build_estimator(spec: EstimatorSpec, budget: u64, stats: Option<&LevelStats>) -> Result<Estimator> {
    let per_call = |expected: f64| ((budget as f64 / expected).floor() as usize).max(1);
    Ok(match spec {
        EstimatorSpec::Nmc { k } => {
            if k == 0 {
                bail!("NMC needs K >= 1");
            }
            Estimator::Nmc { k, m: per_call(k as f64) }
        }
        EstimatorSpec::Mlmc { level } => {
            let stats = stats.ok_or_else(|| anyhow!("MLMC needs pilot statistics"))?;
            Estimator::Mlmc {
                plan: plan_for_level(stats, level, budget, true)?,
            }
        }
        EstimatorSpec::RandomizedMlmc { level } => {
            let weights = LevelWeights::geometric(2.0, level)?;
            let m = per_call(weights.expected_cost());
            Estimator::RandomizedMlmc { weights, m }
        }
        EstimatorSpec::Sumo { k_max } => Estimator::Sumo {
            truncation: SumoTruncation::hard(k_max)?,
            m: per_call(harmonic(k_max)),
        },
        EstimatorSpec::SumoSoft { knee } => {
            let truncation = SumoTruncation::soft(knee)?;
            Estimator::Sumo {
                m: per_call(truncation.expected_k()),
                truncation,
            }
        }
        EstimatorSpec::Jackknife { k } => {
            if k < 2 {
                bail!("jackknife needs K >= 2");
            }
            Estimator::Jackknife { k, m: per_call(k as f64) }
        }
    })
}

/// Builds the estimator for `spec`, running a pilot at `theta0` if needed.
pub fn prepare_estimator(
    spec: EstimatorSpec,
    model: &dyn LatentVariableModel,
    data: &Dataset,
    theta0: &[f64],
    budget: u64,
    pilot_reps: usize,
    seed: u64,
) -> Result<Estimator> {
    let stats = match spec {
        EstimatorSpec::Mlmc { level } => Some(fit_pilot(model, data, theta0, level, pilot_reps, seed)?),
        _ => None,
    };
    build_estimator(spec, budget, stats.as_ref())
}

fn default_estimators() -> Vec<String> {
    ["nmc:1", "nmc:8", "mlmc:5", "rmlmc:5", "sumo:32", "jackknife:32"]
        .map(String::from)
        .to_vec()
}

/// Settings for repeated fits; read from flat `key = value` TOML.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub model: ModelKind,
    /// Dataset CSV; generated from `n`, `t`, `theta_star`, `data_seed` when absent.
    pub data: Option<String>,
    pub n: usize,
    pub t: usize,
    pub theta_star: Option<Vec<f64>>,
    pub data_seed: u64,
    pub estimators: Vec<String>,
    pub reps: usize,
    pub iters: usize,
    pub budget: u64,
    pub lr: f64,
    pub pilot_reps: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Relogit,
            data: None,
            n: 1000,
            t: DEFAULT_T,
            theta_star: None,
            data_seed: 0,
            estimators: default_estimators(),
            reps: 100,
            iters: 3000,
            budget: DEFAULT_BUDGET,
            lr: AdamConfig::default().lr,
            pilot_reps: DEFAULT_FIT_PILOT_REPS,
            seed: 0,
        }
    }
}

impl CompareConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("bad compare config")
    }

    pub fn theta_star(&self) -> Vec<f64> {
        self.theta_star.clone().unwrap_or_else(|| self.model.default_theta_star())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            Some(p) => load_dataset(Path::new(p)),
            None => generate(self.model, self.n, self.t, &self.theta_star(), self.data_seed),
        }
    }
}

/// Fits every estimator `reps` times on one dataset from `θ = 0` and
/// tabulates the final parameters against `theta_star`.
pub fn run_comparison(cfg: &CompareConfig) -> Result<ComparisonTable> {
    let data = cfg.dataset()?;
    let model = AnyModel::for_data(&data, Some(cfg.model))?;
    let model = model.as_dyn();
    let theta_star = cfg.theta_star();
    if theta_star.len() != model.param_dim() {
        bail!("theta_star has {} entries, model needs {}", theta_star.len(), model.param_dim());
    }
    let theta0 = vec![0.0; model.param_dim()];
    let mut groups = Vec::new();
    for (i, name) in cfg.estimators.iter().enumerate() {
        let spec: EstimatorSpec = name.parse()?;
        let est_seed = fork(cfg.seed, i as u64);
        let est = prepare_estimator(spec, model, &data, &theta0, cfg.budget, cfg.pilot_reps, fork(est_seed, u64::MAX))?;
        let thetas = (0..cfg.reps as u64)
            .into_par_iter()
            .map(|r| {
                let fc = FitConfig {
                    iters: cfg.iters,
                    record_every: cfg.iters.max(1),
                    seed: fork(est_seed, r),
                    adam: AdamConfig {
                        lr: cfg.lr,
                        ..AdamConfig::default()
                    },
                    theta0: Some(theta0.clone()),
                    theta_star: None,
                };
                let trace = fit(model, &data, &est, &fc)?;
                Ok(trace.final_theta().expect("non-empty trace").to_vec())
            })
            .collect::<mlmc_evidence::Result<Vec<_>>>()
            .with_context(|| format!("fitting with {name}"))?;
        groups.push(FitGroup {
            label: est.label(),
            thetas,
        });
    }
    Ok(comparison_table(&groups, &theta_star, &model.param_names())?)
}
