use mlmc_evidence::allocation::{pilot_levels, AllocationPlan};
use mlmc_evidence::estimators::{Estimator, LevelWeights, SumoTruncation};
use mlmc_evidence::lmelbo::{lmelbo_gradient, BayesianSpec, LmelboParams};
use mlmc_evidence::models::*;
use mlmc_evidence::optimizer::{fit, FitConfig};

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

#[test]
fn estimators_are_thread_count_invariant() {
    let data = generate_relogit_data(300, 2, &RELOGIT_THETA_STAR, 1).unwrap().dataset;
    let model = RandomEffectLogisticModel::new(3, 2);
    let theta = [0.3, -0.1, 0.2, 0.4, 0.6];
    let estimators = [
        Estimator::Nmc { k: 8, m: 64 },
        Estimator::Mlmc {
            plan: AllocationPlan::from_minibatch(vec![40, 20, 10, 5]).unwrap(),
        },
        Estimator::RandomizedMlmc {
            weights: LevelWeights::geometric(2.0, 6).unwrap(),
            m: 50,
        },
        Estimator::Sumo {
            truncation: SumoTruncation::hard(64).unwrap(),
            m: 30,
        },
        Estimator::Jackknife { k: 8, m: 20 },
    ];
    for est in &estimators {
        let run = || est.gradient(&model, &data, &theta, 300.0, 42).unwrap();
        let one = with_threads(1, run);
        let four = with_threads(4, run);
        assert_eq!(one, four, "{}", est.label());
    }
}

#[test]
fn pilot_fit_and_lmelbo_are_thread_count_invariant() {
    let data = generate_relogit_data(200, 2, &RELOGIT_THETA_STAR, 2).unwrap().dataset;
    let model = RandomEffectLogisticModel::new(3, 2);
    let pilot = || pilot_levels(&model, &data, &RELOGIT_THETA_STAR, 4, 300, 9, true).unwrap();
    assert_eq!(with_threads(1, pilot), with_threads(3, pilot));

    let cfg = FitConfig {
        iters: 25,
        record_every: 5,
        seed: 4,
        ..FitConfig::default()
    };
    let est = Estimator::Mlmc {
        plan: AllocationPlan::from_minibatch(vec![16, 8, 4]).unwrap(),
    };
    let strip = |t: mlmc_evidence::optimizer::TrainTrace| {
        t.records.into_iter().map(|r| (r.iter, r.cost, r.theta)).collect::<Vec<_>>()
    };
    let a = with_threads(1, || strip(fit(&model, &data, &est, &cfg).unwrap()));
    let b = with_threads(4, || strip(fit(&model, &data, &est, &cfg).unwrap()));
    assert_eq!(a, b);

    let spec = BayesianSpec::relogit(3, 1.0).unwrap();
    let params = LmelboParams::initial(5, &spec, 0.3).unwrap();
    let plan = AllocationPlan::from_minibatch(vec![16, 8, 4]).unwrap();
    let g = || lmelbo_gradient(&model, &data, &spec, &params, &plan, 8).unwrap();
    assert_eq!(with_threads(1, g), with_threads(4, g));
}
