use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use tank_inverse::io::{cmd_diagnose, cmd_fit, cmd_reconstruct, cmd_simulate, RunConfig};

/// Reconstruct the initial level of a partially drained tank.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset and its ground truth.
    Simulate,
    /// Sample the posterior and write samples, summaries and tables.
    Fit,
    /// Summarize the pollution initial condition from a samples file.
    Reconstruct {
        /// Defaults to `<out_dir>/samples.csv`.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Convergence diagnostics for a samples file.
    Diagnose {
        /// Defaults to `<out_dir>/samples.csv`.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

enum Status {
    Healthy,
    Warnings,
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        config.out_dir = dir;
    }
    let samples_or_default = |s: Option<PathBuf>| s.unwrap_or_else(|| config.out_dir.join("samples.csv"));

    match cli.command {
        Command::Simulate => {
            let out = cmd_simulate(&config).context("simulate")?;
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            Ok(Status::Healthy)
        }
        Command::Fit => {
            let out = cmd_fit(&config).context("fit")?;
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            for p in &out.summary.parameters {
                println!(
                    "{:<10} mean {:>10.4}  90% [{:.4}, {:.4}]",
                    p.name, p.mean, p.ci90.0, p.ci90.1
                );
            }
            if out.is_healthy() {
                Ok(Status::Healthy)
            } else {
                for f in &out.health_failures {
                    eprintln!("health check: {f}");
                }
                Ok(Status::Warnings)
            }
        }
        Command::Reconstruct { samples } => {
            let path = samples_or_default(samples);
            let report = cmd_reconstruct(&config, &path).context("reconstruct")?;
            println!(
                "h0 90% [{:.3}, {:.3}] cm, t0 90% [{:.2}, {:.2}] s",
                report.h0.ci90_low, report.h0.ci90_high, report.t0.ci90_low, report.t0.ci90_high
            );
            if let Some(h) = &report.held_out {
                println!("held-out h0 = {} cm inside 90% interval: {}", h.h0, h.h0_in_ci90);
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(if report.warnings.is_empty() {
                Status::Healthy
            } else {
                Status::Warnings
            })
        }
        Command::Diagnose { samples } => {
            let path = samples_or_default(samples);
            let report = cmd_diagnose(&path, &config.out_dir).context("diagnose")?;
            for row in &report.parameters {
                let rhat = row.rhat.map_or("n/a".into(), |r| format!("{r:.4}"));
                let ess = row.ess.map_or("n/a".into(), |e| format!("{e:.0}"));
                println!("{:<10} rhat {rhat:>8}  ess {ess:>8}", row.parameter);
            }
            for f in &report.failures {
                eprintln!("health check: {f}");
            }
            Ok(if report.healthy { Status::Healthy } else { Status::Warnings })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Status::Healthy) => ExitCode::SUCCESS,
        Ok(Status::Warnings) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
