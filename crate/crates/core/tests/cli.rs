mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tank-inverse");

fn write_config(dir: &Path, chains: usize, iterations: usize) -> std::path::PathBuf {
    let config = common::short_config(&dir.join("out"), chains, iterations);
    let path = dir.join("run.toml");
    fs::write(&path, toml::to_string(&config).unwrap()).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn simulate_fit_reconstruct_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 2, 400);
    let out_dir = dir.path().join("out");

    assert_eq!(code(&run(&config, &["simulate"])), 0);
    assert!(out_dir.join("dataset.csv").exists());
    assert!(out_dir.join("truth.toml").exists());

    // 2 x 267 kept draws cannot reach the ESS gate, so fit reports warnings
    let fit = run(&config, &["fit"]);
    assert_eq!(code(&fit), 2, "{}", String::from_utf8_lossy(&fit.stderr));
    for f in [
        "samples.csv",
        "summary.toml",
        "correlation.csv",
        "diagnostics.csv",
        "trajectories.csv",
        "discrepancy.csv",
        "residuals.csv",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let header = fs::read_to_string(out_dir.join("samples.csv")).unwrap();
    assert!(header.starts_with("chain,iteration,log_posterior,h_max,x_t,x_b,c,r,a_0,a_1,a_2,sigma,t0,h0"));

    let rec = run(&config, &["reconstruct"]);
    assert!(code(&rec) == 0 || code(&rec) == 2);
    let stdout = String::from_utf8_lossy(&rec.stdout);
    assert!(stdout.contains("h0 90%"), "{stdout}");
    assert!(out_dir.join("reconstruction.toml").exists());

    let diag = run(&config, &["diagnose"]);
    assert_eq!(code(&diag), 2);
    assert!(String::from_utf8_lossy(&diag.stderr).contains("ESS"));
    assert!(out_dir.join("trace.csv").exists());
}

#[test]
fn fit_output_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 2, 120);
    assert_eq!(code(&run(&config, &["simulate"])), 0);
    let samples = |out: &str, seed: &str| {
        let out_dir = dir.path().join(out);
        fs::create_dir_all(&out_dir).unwrap();
        fs::copy(dir.path().join("out/dataset.csv"), out_dir.join("dataset.csv")).unwrap();
        let o = run(&config, &["--out-dir", out_dir.to_str().unwrap(), "--seed", seed, "fit"]);
        assert_ne!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out_dir.join("samples.csv")).unwrap()
    };
    let a = samples("a", "11");
    let b = samples("b", "11");
    let c = samples("c", "12");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = run(&missing, &["fit"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let config = write_config(dir.path(), 2, 100);
    // no dataset yet
    assert_eq!(code(&run(&config, &["fit"])), 1);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&run(&config, &["diagnose", "--samples", empty.to_str().unwrap()])), 1);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[sampler]\nn_iterations = 0\n").unwrap();
    assert_eq!(code(&run(&bad, &["simulate"])), 1);
}

#[test]
fn simulate_without_a_simulation_section_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plain.toml");
    fs::write(&path, format!("out_dir = {:?}\n", dir.path().join("out"))).unwrap();
    let o = run(&path, &["simulate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("[simulate]"));
}
