mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;

use tank_inverse::diagnostics::{constrained_draws, HealthGates, PosteriorSummary};
use tank_inverse::model::Prior;
use tank_inverse::sampler::{
    chain_rng, initialize_chains, initialize_from_prior, run_chains, run_chains_sequential, Algorithm, LogDensity,
    SamplerConfig,
};
use tank_inverse::Error;

/// Beta(6, 4) on the logit scale, Jacobian included.
struct LogitBeta;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogDensity for LogitBeta {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let s = sigmoid(x[0]);
        6.0 * s.ln() + 4.0 * (1.0 - s).ln()
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let s = sigmoid(x[0]);
        grad[0] = 6.0 - 10.0 * s;
        self.log_density(x)
    }
}

#[test]
fn logit_beta_target_recovers_mean_and_variance() {
    for algorithm in [Algorithm::Hmc, Algorithm::AdaptiveMetropolis] {
        let config = SamplerConfig {
            algorithm,
            n_iterations: 6000,
            seed: 21,
            ..Default::default()
        };
        let inits = vec![vec![-2.0], vec![-0.5], vec![0.5], vec![2.0]];
        let traces = run_chains(&LogitBeta, &config, &inits).unwrap();
        let x: Vec<f64> = traces
            .iter()
            .flat_map(|t| t.kept_draws().iter().map(|d| sigmoid(d[0])))
            .collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Beta(6, 4): mean 0.6, variance 24 / 1100
        assert!((mean - 0.6).abs() < 0.01, "{algorithm:?} mean {mean}");
        assert!((var - 24.0 / 1100.0).abs() < 0.002, "{algorithm:?} var {var}");
    }
}

#[test]
fn relabeling_chains_leaves_pooled_summaries_unchanged() {
    let config = SamplerConfig {
        n_iterations: 1500,
        seed: 3,
        ..Default::default()
    };
    let inits = vec![vec![-1.0], vec![0.0], vec![1.0], vec![0.3]];
    let traces = run_chains_sequential(&LogitBeta, &config, &inits).unwrap();
    let draws: Vec<Vec<Vec<f64>>> = traces.iter().map(|t| t.kept_draws().to_vec()).collect();
    let mut shuffled = draws.clone();
    shuffled.rotate_left(1);
    shuffled.swap(0, 2);
    let names = vec!["z".to_string()];
    let a = PosteriorSummary::from_draws(&names, &draws).unwrap();
    let b = PosteriorSummary::from_draws(&names, &shuffled).unwrap();
    let (pa, pb) = (&a.parameters[0], &b.parameters[0]);
    assert_relative_eq!(pa.mean, pb.mean, epsilon = 1e-12);
    assert_relative_eq!(pa.sd, pb.sd, epsilon = 1e-12);
    assert_eq!(pa.ci90, pb.ci90);
    assert_eq!(pa.ci95, pb.ci95);
    assert_relative_eq!(pa.rhat.unwrap(), pb.rhat.unwrap(), epsilon = 1e-10);
    assert_relative_eq!(pa.ess.unwrap().value, pb.ess.unwrap().value, max_relative = 1e-10);
}

#[test]
fn initialization_fails_when_prior_mass_is_outside_support() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, _) = common::simulated_model(dir.path());
    config.prior.discharge = Prior::Normal { mean: 5.0, sd: 0.01 };
    let dataset = tank_inverse::io::load_dataset(&config.dataset_path(), &config.data).unwrap();
    let model = tank_inverse::model::TankModel::new(dataset, config.prior.clone(), config.constants().unwrap(), 2).unwrap();
    let mut rng = chain_rng(1, 0);
    let err = initialize_from_prior(&mut rng, &model, 0).unwrap_err();
    assert!(matches!(err, Error::Initialization(_)), "{err}");
}

#[test]
fn short_tank_run_fails_the_ess_gate() {
    let dir = tempfile::tempdir().unwrap();
    let (config, model) = common::simulated_model(dir.path());
    let sampler = SamplerConfig {
        n_chains: 2,
        n_iterations: 60,
        ..config.sampler_config()
    };
    let inits = initialize_chains(&model, &sampler, 100).unwrap();
    let traces = run_chains(&model, &sampler, &inits).unwrap();
    let draws = constrained_draws(&traces, &model).unwrap();
    let summary = PosteriorSummary::from_draws(&model.layout().names(), &draws).unwrap();
    let failures = summary.health_failures(&HealthGates::default());
    assert!(failures.iter().any(|f| f.contains("ESS")), "{failures:?}");
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_runs_agree_on_the_tank_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let (config, model) = common::simulated_model(dir.path());
    let sampler = SamplerConfig {
        n_chains: 3,
        n_iterations: 80,
        ..config.sampler_config()
    };
    let inits = initialize_chains(&model, &sampler, 100).unwrap();
    let seq = run_chains_sequential(&model, &sampler, &inits).unwrap();
    let par = tank_inverse::sampler::run_chains_parallel(&model, &sampler, &inits).unwrap();
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.log_density, b.log_density);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prior_initialization_is_finite_and_in_support(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let (config, model) = common::simulated_model(dir.path());
        let sampler = SamplerConfig { seed, ..config.sampler_config() };
        let inits = initialize_chains(&model, &sampler, config.init_retries).unwrap();
        for z in &inits {
            prop_assert!(z.iter().all(|v| v.is_finite()));
            prop_assert!(model.log_density(z).is_finite());
            let beta = model.from_unconstrained(z).unwrap();
            prop_assert!(beta.orifice.discharge > 0.0 && beta.orifice.discharge < 1.0);
            prop_assert!(beta.sigma > 0.0);
            prop_assert!(beta.pollution.h0 > 0.0 && beta.pollution.h0 < beta.geometry.h_max);
        }
    }
}
