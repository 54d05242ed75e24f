use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mlmc_evidence::allocation::{pilot_levels, plan_for_level};
use mlmc_evidence::diagnostics::{decay_report, efficiency_report, write_efficiency_csv, EfficiencyConfig};
use mlmc_evidence::lmelbo::{fit_bayesian, BayesianSpec};
use mlmc_evidence::models::{write_dataset_csv, DEFAULT_N, DEFAULT_T};
use mlmc_evidence::optimizer::{fit, AdamConfig, FitConfig};
use mlmc_evidence::rng::fork;
use mlmc_evidence::Dataset;
use mlmc_evidence_cli::*;

#[derive(Parser)]
#[command(name = "mlmc-evidence", version, about = "Debiased evidence estimation experiments")]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true, env = "MLMC_EVIDENCE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum, default_value = "relogit")]
        model: ModelKind,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_T)]
        t: usize,
        /// Comma-separated ground truth; defaults to the model's standard values.
        #[arg(long)]
        theta_star: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-level mean and variance of the coupled corrections, with fitted rates.
    Decay {
        #[command(flatten)]
        data: DataArgs,
        /// Parameter at which corrections are sampled (default: ground truth).
        #[arg(long)]
        theta: Option<String>,
        #[arg(long, default_value_t = 7)]
        levels: usize,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        /// Also sample gradient corrections.
        #[arg(long)]
        grad: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw level statistics.
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Maximize the evidence with Adam and one gradient estimator.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = ["nmc", "mlmc", "rmlmc", "sumo", "sumo-soft", "jackknife"])]
        estimator: String,
        /// Inner samples for nmc/jackknife, cap for sumo, knee for sumo-soft.
        #[arg(long = "K", alias = "k")]
        k: Option<usize>,
        /// Maximum level for mlmc/rmlmc.
        #[arg(long = "L", alias = "l")]
        l: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = AdamConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        record_every: usize,
        #[arg(long, default_value_t = DEFAULT_FIT_PILOT_REPS)]
        pilot_reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace_out: PathBuf,
        /// Write measured wall time instead of 0 (breaks byte-identical reruns).
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Repeated fits over several estimators, tabulated against the ground truth.
    Compare {
        /// Flat key = value TOML file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated, e.g. "nmc:1,mlmc:5,rmlmc:5".
        #[arg(long)]
        estimators: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient variance times cost at matched bias levels.
    Efficiency {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        theta: Option<String>,
        /// Levels as "3..7" or "3,5,7".
        #[arg(long, default_value = "3..7")]
        levels: String,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 4096)]
        budget: u64,
        #[arg(long, default_value_t = 2000)]
        pilot_reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variational fit of the Bayesian random-effect logistic model.
    LmelboFit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1.0)]
        prior_std: f64,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long = "L", alias = "l", default_value_t = 5)]
        l: usize,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
        #[arg(long, default_value_t = AdamConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_FIT_PILOT_REPS)]
        pilot_reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Posterior summary CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
}

/// Dataset from a CSV, or a freshly generated synthetic one.
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Size of the generated dataset when --data is absent.
    #[arg(long, default_value_t = DEFAULT_N)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, AnyModel)> {
        let data = match &self.data {
            Some(p) => load_dataset(p)?,
            None => {
                let kind = self.model.unwrap_or(ModelKind::Relogit);
                generate(kind, self.n, DEFAULT_T, &kind.default_theta_star(), self.data_seed)?
            }
        };
        let model = AnyModel::for_data(&data, self.model)?;
        Ok((data, model))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn theta_or_default(arg: &Option<String>, model: &AnyModel) -> Result<Vec<f64>> {
    let theta = match arg {
        Some(s) => parse_vector(s)?,
        None => model.kind().default_theta_star(),
    };
    let p = model.as_dyn().param_dim();
    if theta.len() != p {
        bail!("theta has {} entries, model needs {p}", theta.len());
    }
    Ok(theta)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            model,
            n,
            t,
            theta_star,
            seed,
            out,
        } => {
            let theta = match theta_star {
                Some(s) => parse_vector(&s)?,
                None => model.default_theta_star(),
            };
            let data = generate(model, n, t, &theta, seed)?;
            let mut w = create(&out)?;
            write_dataset_csv(&data, &mut w)?;
            w.flush()?;
        }
        Command::Decay {
            data,
            theta,
            levels,
            reps,
            grad,
            seed,
            out,
            stats_out,
        } => {
            let (data, model) = data.load()?;
            let theta = theta_or_default(&theta, &model)?;
            let stats = pilot_levels(model.as_dyn(), &data, &theta, levels, reps, seed, grad)?;
            let report = decay_report(&stats)?;
            let mut w = create(&out)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            if let Some(p) = stats_out {
                let mut w = create(&p)?;
                stats.write_csv(&mut w)?;
                w.flush()?;
            }
            println!("alpha_hat={} beta_hat={}", report.alpha, report.beta);
            if let (Some(a), Some(b)) = (report.grad_alpha, report.grad_beta) {
                println!("grad_alpha_hat={a} grad_beta_hat={b}");
            }
        }
        Command::Fit {
            data,
            estimator,
            k,
            l,
            budget,
            iters,
            lr,
            record_every,
            pilot_reps,
            seed,
            trace_out,
            record_wall_time,
        } => {
            let (data, model) = data.load()?;
            let need = |v: Option<usize>, flag: &str| -> Result<usize> {
                v.with_context(|| format!("--estimator {estimator} needs --{flag}"))
            };
            let spec = match estimator.as_str() {
                "nmc" => EstimatorSpec::Nmc { k: need(k, "K")? },
                "mlmc" => EstimatorSpec::Mlmc { level: need(l, "L")? },
                "rmlmc" => EstimatorSpec::RandomizedMlmc { level: need(l, "L")? },
                "sumo" => EstimatorSpec::Sumo { k_max: need(k, "K")? },
                "sumo-soft" => EstimatorSpec::SumoSoft {
                    knee: k.unwrap_or(mlmc_evidence::estimators::DEFAULT_SUMO_KNEE),
                },
                "jackknife" => EstimatorSpec::Jackknife { k: need(k, "K")? },
                other => bail!("unknown estimator {other}"),
            };
            let m = model.as_dyn();
            let theta0 = vec![0.0; m.param_dim()];
            let est = prepare_estimator(spec, m, &data, &theta0, budget, pilot_reps, fork(seed, u64::MAX))?;
            let cfg = FitConfig {
                iters,
                record_every,
                seed,
                adam: AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                theta0: Some(theta0),
                theta_star: Some(model.kind().default_theta_star()),
            };
            let trace = fit(m, &data, &est, &cfg)?;
            let mut w = create(&trace_out)?;
            trace.write_csv(&mut w, record_wall_time)?;
            w.flush()?;
        }
        Command::Compare {
            config,
            reps,
            iters,
            n,
            budget,
            lr,
            seed,
            estimators,
            data,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
                    CompareConfig::from_toml(&text)?
                }
                None => CompareConfig::default(),
            };
            cfg.reps = reps.unwrap_or(cfg.reps);
            cfg.iters = iters.unwrap_or(cfg.iters);
            cfg.n = n.unwrap_or(cfg.n);
            cfg.budget = budget.unwrap_or(cfg.budget);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.seed = seed.unwrap_or(cfg.seed);
            if let Some(e) = estimators {
                cfg.estimators = e.split(',').map(|s| s.trim().to_string()).collect();
            }
            if data.is_some() {
                cfg.data = data;
            }
            let table = run_comparison(&cfg)?;
            let mut w = create(&out)?;
            table.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Efficiency {
            data,
            theta,
            levels,
            reps,
            budget,
            pilot_reps,
            seed,
            out,
        } => {
            let (data, model) = data.load()?;
            let theta = theta_or_default(&theta, &model)?;
            let cfg = EfficiencyConfig {
                levels: parse_levels(&levels)?,
                reps,
                budget,
                pilot_reps,
                seed,
                ..EfficiencyConfig::default()
            };
            let rows = efficiency_report(model.as_dyn(), &data, &theta, &cfg)?;
            let mut w = create(&out)?;
            write_efficiency_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Command::LmelboFit {
            data,
            prior_std,
            iters,
            l,
            budget,
            lr,
            pilot_reps,
            seed,
            out,
            trace_out,
        } => {
            let (data, model) = data.load()?;
            let AnyModel::Relogit(relogit) = &model else {
                bail!("lmelbo-fit supports the relogit model only");
            };
            let spec = BayesianSpec::relogit(relogit.feature_dim(), prior_std)?;
            let m = model.as_dyn();
            let theta0 = vec![0.0; m.param_dim()];
            let stats = fit_pilot(m, &data, &theta0, l, pilot_reps, fork(seed, u64::MAX))?;
            let plan = plan_for_level(&stats, l, budget, true)?;
            let cfg = FitConfig {
                iters,
                record_every: 10,
                seed,
                adam: AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                theta0: None,
                theta_star: None,
            };
            let (trace, params) = fit_bayesian(m, &data, &spec, &plan, &cfg)?;
            let mut w = create(&out)?;
            params.write_summary_csv(&spec, &m.param_names(), &mut w)?;
            w.flush()?;
            if let Some(p) = trace_out {
                let mut w = create(&p)?;
                trace.write_csv(&mut w, false)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
