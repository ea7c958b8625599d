#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tank_inverse::io::{cmd_simulate, RunConfig};
use tank_inverse::model::TankModel;

pub fn example_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tank.toml")
}

/// The example configuration redirected into `out_dir`, with a short sampler run.
pub fn short_config(out_dir: &Path, chains: usize, iterations: usize) -> RunConfig {
    let mut config = RunConfig::from_file(&example_config_path()).unwrap();
    config.out_dir = out_dir.to_path_buf();
    config.sampler.n_chains = chains;
    config.sampler.n_iterations = iterations;
    config.output.trajectory_draws = 20;
    config.output.trajectory_points = 31;
    config.output.mae_draws = 40;
    config
}

pub fn simulated_model(out_dir: &Path) -> (RunConfig, TankModel) {
    let config = short_config(out_dir, 2, 100);
    let sim = cmd_simulate(&config).unwrap();
    let model = TankModel::new(sim.dataset, config.prior.clone(), config.constants().unwrap(), config.degree).unwrap();
    (config, model)
}
