//! Configuration, file formats and the simulate → fit → reconstruct →
//! diagnose workflow.
//!
//! Datasets are CSV with header `experiment_id,kind,t,level,held_out`. Every
//! file written here is a pure function of the configuration and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    acceptance_failures, constrained_draws, credible_interval, discrepancy_vs_residuals, parameter_chains,
    posterior_correlation, thinned_draws, trajectory_mae, DiscrepancyTable, DiscrepancyTableOptions, HealthGates,
    PosteriorSummary,
};
use crate::discrepancy::DEFAULT_DEGREE;
use crate::error::{Error, Result};
use crate::forward::{PhysicalConstants, DEFAULT_GRAVITY};
use crate::model::{
    physics_levels, simulate_dataset, Dataset, DatasetDesign, Experiment, ExperimentDesign, ExperimentKind,
    Observation, ParameterVector, PriorSpec, TankModel,
};
use crate::parallel;
use crate::sampler::{initialize_chains, run_chains, Algorithm, SamplerConfig};

pub const DATASET_HEADER: [&str; 5] = ["experiment_id", "kind", "t", "level", "held_out"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[serde(rename = "s")]
    #[default]
    Seconds,
    #[serde(rename = "min")]
    Minutes,
}

impl TimeUnit {
    pub fn to_seconds(self, t: f64) -> f64 {
        match self {
            TimeUnit::Seconds => t,
            TimeUnit::Minutes => t * 60.0,
        }
    }

    pub fn from_seconds(self, t: f64) -> f64 {
        match self {
            TimeUnit::Seconds => t,
            TimeUnit::Minutes => t / 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelUnit {
    Mm,
    #[default]
    Cm,
    M,
}

impl LevelUnit {
    fn cm_per_unit(self) -> f64 {
        match self {
            LevelUnit::Mm => 0.1,
            LevelUnit::Cm => 1.0,
            LevelUnit::M => 100.0,
        }
    }

    pub fn to_cm(self, level: f64) -> f64 {
        level * self.cm_per_unit()
    }

    pub fn from_cm(self, level: f64) -> f64 {
        level / self.cm_per_unit()
    }
}

/// How a dataset file is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Defaults to `<out_dir>/dataset.csv`.
    pub path: Option<PathBuf>,
    pub time_unit: TimeUnit,
    pub level_unit: LevelUnit,
    /// Calibration observations at or below this level (cm) are dropped.
    pub level_cutoff: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            time_unit: TimeUnit::Seconds,
            level_unit: LevelUnit::Cm,
            level_cutoff: 0.0,
        }
    }
}

/// Ground truth and observation schedule for `simulate`. Times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub truth: ParameterVector,
    pub experiments: Vec<ExperimentDesign>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Posterior draws used for predictive curves and the discrepancy table.
    pub trajectory_draws: usize,
    /// Time points per predictive curve.
    pub trajectory_points: usize,
    /// Posterior draws averaged in the trajectory MAE.
    pub mae_draws: usize,
    pub discrepancy_grid_points: usize,
    pub residual_bins: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trajectory_draws: 200,
            trajectory_points: 121,
            mae_draws: 400,
            discrepancy_grid_points: 29,
            residual_bins: 14,
        }
    }
}

/// Everything a run needs, normally read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Gravitational acceleration (cm/s²).
    pub gravity: f64,
    /// Bernstein degree of the discrepancy.
    pub degree: usize,
    /// Prior draws tried per chain before initialization fails.
    pub init_retries: usize,
    pub data: DataConfig,
    pub prior: PriorSpec,
    pub sampler: SamplerConfig,
    pub output: OutputConfig,
    pub simulate: Option<SimulationConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            gravity: DEFAULT_GRAVITY,
            degree: DEFAULT_DEGREE,
            init_retries: 100,
            data: DataConfig::default(),
            prior: PriorSpec::default(),
            sampler: SamplerConfig::default(),
            output: OutputConfig::default(),
            simulate: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file. A relative `data.path` is resolved against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        if let (Some(data), Some(dir)) = (config.data.path.as_mut(), path.parent()) {
            if data.is_relative() {
                *data = dir.join(&*data);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.sampler.validate()?;
        PhysicalConstants::new(self.gravity)?;
        if !self.data.level_cutoff.is_finite() {
            return Err(Error::Config("level_cutoff must be finite".into()));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out_dir.join("dataset.csv"))
    }

    pub fn constants(&self) -> Result<PhysicalConstants> {
        PhysicalConstants::new(self.gravity)
    }

    /// Sampler settings with the run seed applied.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }
}

#[derive(Debug, Deserialize)]
struct DatasetRow {
    experiment_id: String,
    kind: String,
    t: f64,
    level: f64,
    held_out: String,
}

fn parse_flag(s: &str, line: u64) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" => Ok(false),
        "1" | "true" | "yes" => Ok(true),
        other => Err(Error::Parse {
            line,
            message: format!("held_out must be a boolean, got '{other}'"),
        }),
    }
}

fn parse_kind(s: &str, line: u64) -> Result<ExperimentKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "pollution" => Ok(ExperimentKind::Pollution),
        "calibration" => Ok(ExperimentKind::Calibration),
        other => Err(Error::Parse {
            line,
            message: format!("kind must be 'pollution' or 'calibration', got '{other}'"),
        }),
    }
}

fn csv_parse_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    Error::Parse { line, message }
}

#[derive(Default)]
struct PendingExperiment {
    kind: Option<ExperimentKind>,
    observations: Vec<Observation>,
    held_out: Option<Observation>,
    times: BTreeSet<u64>,
}

/// Read a dataset, converting to seconds and centimetres. Calibration rows
/// at or below `data.level_cutoff` are dropped; held-out rows are kept aside
/// for validation and never enter the likelihood.
pub fn load_dataset(path: &Path, data: &DataConfig) -> Result<Dataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(&text, data)
}

pub fn parse_dataset(text: &str, data: &DataConfig) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| csv_parse_error(e, 1))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Parse {
            line: 1,
            message: "empty dataset file".into(),
        });
    }
    let got: Vec<&str> = headers.iter().collect();
    if got != DATASET_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header '{}', got '{}'", DATASET_HEADER.join(","), got.join(",")),
        });
    }

    let mut pending: BTreeMap<String, PendingExperiment> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_parse_error(e, line)),
        }
        let line = record.position().map_or(line, |p| p.line());
        let row: DatasetRow = record.deserialize(Some(&headers)).map_err(|e| csv_parse_error(e, line))?;
        let kind = parse_kind(&row.kind, line)?;
        let held_out = parse_flag(&row.held_out, line)?;
        if row.experiment_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty experiment_id".into(),
            });
        }
        if !(row.t.is_finite() && row.level.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "t and level must be finite".into(),
            });
        }
        let t = data.time_unit.to_seconds(row.t);
        let obs = Observation {
            t,
            level: data.level_unit.to_cm(row.level),
        };
        let entry = pending.entry(row.experiment_id.clone()).or_default();
        match entry.kind {
            None => entry.kind = Some(kind),
            Some(k) if k != kind => {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "experiment '{}' is {} in an earlier row but {} here",
                        row.experiment_id,
                        k.as_str(),
                        kind.as_str()
                    ),
                })
            }
            Some(_) => {}
        }
        if !entry.times.insert(t.to_bits()) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate time {} for experiment '{}'", row.t, row.experiment_id),
            });
        }
        if held_out {
            if entry.held_out.is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("experiment '{}' has more than one held-out row", row.experiment_id),
                });
            }
            entry.held_out = Some(obs);
        } else {
            entry.observations.push(obs);
        }
    }

    let experiments = pending
        .into_iter()
        .map(|(id, mut p)| {
            p.observations.sort_by(|a, b| a.t.total_cmp(&b.t));
            Experiment::new(
                id,
                p.kind.expect("set with the first row"),
                p.observations,
                data.level_cutoff,
                p.held_out,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(experiments)
}

/// Dataset as CSV in the given units; held-out rows follow their experiment's
/// observations.
pub fn format_dataset(dataset: &Dataset, data: &DataConfig) -> String {
    let mut out = DATASET_HEADER.join(",");
    out.push('\n');
    for exp in dataset.experiments() {
        let rows = exp
            .observations
            .iter()
            .map(|o| (o, 0))
            .chain(exp.held_out.iter().map(|o| (o, 1)));
        for (o, flag) in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                exp.id,
                exp.kind.as_str(),
                data.time_unit.from_seconds(o.t),
                data.level_unit.from_cm(o.level),
                flag
            );
        }
    }
    out
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("cannot serialize report: {e}")))
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub dataset: Dataset,
    pub files: Vec<PathBuf>,
}

/// Synthesize a dataset from `config.simulate` and write `dataset.csv` and
/// `truth.toml` into the output directory.
pub fn cmd_simulate(config: &RunConfig) -> Result<SimulateOutput> {
    let sim = config
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs a [simulate] section".into()))?;
    let design = DatasetDesign {
        experiments: sim.experiments.clone(),
        level_cutoff: config.data.level_cutoff,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dataset = simulate_dataset(&mut rng, &sim.truth, &design, &config.constants()?)?;
    ensure_dir(&config.out_dir)?;
    let data_path = config.dataset_path();
    if let Some(parent) = data_path.parent() {
        ensure_dir(parent)?;
    }
    let files = vec![
        write_file(&data_path, &format_dataset(&dataset, &config.data))?,
        write_file(&config.out_dir.join("truth.toml"), &to_toml(&sim.truth)?)?,
    ];
    log::info!("simulated {} observations into {}", dataset.n_observations(), data_path.display());
    Ok(SimulateOutput { dataset, files })
}

#[derive(Debug, Serialize)]
struct ParameterRow {
    name: String,
    mean: f64,
    sd: f64,
    ci90_low: f64,
    ci90_high: f64,
    ci95_low: f64,
    ci95_high: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rhat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ess: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ess_capped: Option<bool>,
}

impl ParameterRow {
    fn from_summary(p: &crate::diagnostics::ParameterSummary) -> Self {
        Self {
            name: p.name.clone(),
            mean: p.mean,
            sd: p.sd,
            ci90_low: p.ci90.0,
            ci90_high: p.ci90.1,
            ci95_low: p.ci95.0,
            ci95_high: p.ci95.1,
            rhat: p.rhat,
            ess: p.ess.map(|e| e.value),
            ess_capped: p.ess.map(|e| e.capped),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunInfo {
    seed: u64,
    algorithm: Algorithm,
    n_chains: usize,
    n_iterations: usize,
    burn_in: usize,
    healthy: bool,
    acceptance_rate: Vec<f64>,
    divergences: Vec<usize>,
    step_size: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SummaryFile {
    run: RunInfo,
    health_failures: Vec<String>,
    mae: BTreeMap<String, f64>,
    parameters: Vec<ParameterRow>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: TankModel,
    /// Post-burn-in draws, `[chain][iteration][parameter]`, constrained.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub summary: PosteriorSummary,
    pub discrepancy: DiscrepancyTable,
    pub health_failures: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl FitOutput {
    pub fn is_healthy(&self) -> bool {
        self.health_failures.is_empty()
    }
}

/// Load the dataset, sample the posterior and write samples, summary,
/// predictive curves, discrepancy table and diagnostics. Health-gate failures
/// are returned in the output, not as an error.
pub fn cmd_fit(config: &RunConfig) -> Result<FitOutput> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset_path(), &config.data)?;
    let model = TankModel::new(dataset, config.prior.clone(), config.constants()?, config.degree)?;
    let sampler = config.sampler_config();
    let inits = initialize_chains(&model, &sampler, config.init_retries)?;
    log::info!(
        "sampling {} chains x {} iterations ({:?})",
        sampler.n_chains,
        sampler.n_iterations,
        sampler.algorithm
    );
    let traces = run_chains(&model, &sampler, &inits)?;
    let draws = constrained_draws(&traces, &model)?;
    let names = model.layout().names();
    let mut summary = PosteriorSummary::from_draws(&names, &draws)?;
    for id in model.dataset().calibration_ids() {
        let mae = trajectory_mae(&draws, &model, &id, config.output.mae_draws)?;
        summary.mae.push((id, mae));
    }
    let discrepancy = discrepancy_vs_residuals(
        &draws,
        &model,
        &DiscrepancyTableOptions {
            grid_points: config.output.discrepancy_grid_points,
            bins: config.output.residual_bins,
            n_posterior_draws: config.output.trajectory_draws,
        },
    )?;

    let mut gates = HealthGates::default();
    if sampler.algorithm == Algorithm::AdaptiveMetropolis {
        gates.acceptance = Some((0.1, 0.6));
    }
    let mut health_failures = summary.health_failures(&gates);
    if let Some(band) = gates.acceptance {
        health_failures.extend(acceptance_failures(&traces, band));
    }
    for t in &traces {
        if t.divergences() > 0 {
            health_failures.push(format!("chain {}: {} divergent transitions", t.chain_id, t.divergences()));
        }
    }
    for f in &health_failures {
        log::warn!("{f}");
    }

    let out = &config.out_dir;
    ensure_dir(out)?;
    let mut files = Vec::new();

    let mut samples = String::from("chain,iteration,log_posterior");
    for n in &names {
        samples.push(',');
        samples.push_str(n);
    }
    samples.push('\n');
    for (t, chain) in traces.iter().zip(&draws) {
        for (k, (d, lp)) in chain.iter().zip(t.kept_log_density()).enumerate() {
            let _ = write!(samples, "{},{},{}", t.chain_id, t.burn_in + k, lp);
            for v in d {
                let _ = write!(samples, ",{v}");
            }
            samples.push('\n');
        }
    }
    files.push(write_file(&out.join("samples.csv"), &samples)?);

    let summary_file = SummaryFile {
        run: RunInfo {
            seed: sampler.seed,
            algorithm: sampler.algorithm,
            n_chains: sampler.n_chains,
            n_iterations: sampler.n_iterations,
            burn_in: sampler.burn_in(),
            healthy: health_failures.is_empty(),
            acceptance_rate: traces.iter().map(|t| t.acceptance_rate()).collect(),
            divergences: traces.iter().map(|t| t.divergences()).collect(),
            step_size: traces.iter().map(|t| t.step_size).collect(),
        },
        health_failures: health_failures.clone(),
        mae: summary.mae.iter().cloned().collect(),
        parameters: summary.parameters.iter().map(ParameterRow::from_summary).collect(),
    };
    files.push(write_file(&out.join("summary.toml"), &to_toml(&summary_file)?)?);
    files.push(write_file(&out.join("correlation.csv"), &format_correlation(&summary))?);
    files.push(write_file(
        &out.join("diagnostics.csv"),
        &format_diagnostics(&summary, &HealthGates::default()),
    )?);
    files.push(write_file(
        &out.join("trajectories.csv"),
        &format_trajectories(&draws, &model, &config.output)?,
    )?);
    files.push(write_file(&out.join("discrepancy.csv"), &format_discrepancy(&discrepancy))?);
    files.push(write_file(&out.join("residuals.csv"), &format_residuals(&discrepancy))?);

    Ok(FitOutput {
        model,
        draws,
        summary,
        discrepancy,
        health_failures,
        files,
    })
}

fn format_correlation(summary: &PosteriorSummary) -> String {
    let mut out = String::from("parameter");
    for p in &summary.parameters {
        out.push(',');
        out.push_str(&p.name);
    }
    out.push('\n');
    for (p, row) in summary.parameters.iter().zip(&summary.correlation) {
        out.push_str(&p.name);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn format_diagnostics(summary: &PosteriorSummary, gates: &HealthGates) -> String {
    let mut out = String::from("parameter,rhat,ess,ess_capped,rhat_ok,ess_ok\n");
    for p in &summary.parameters {
        let rhat = p.rhat.map_or("unavailable".to_string(), |r| r.to_string());
        let (ess, capped) = p
            .ess
            .map_or(("unavailable".to_string(), String::new()), |e| (e.value.to_string(), e.capped.to_string()));
        let rhat_ok = p.rhat.is_some_and(|r| r <= gates.max_rhat);
        let ess_ok = p.ess.is_some_and(|e| e.value >= gates.min_ess);
        let _ = writeln!(out, "{},{rhat},{ess},{capped},{rhat_ok},{ess_ok}", p.name);
    }
    out
}

/// Posterior predictive curves: for each thinned draw and experiment, the
/// physics level and the predicted observation mean on a time grid from the
/// earliest sampled start to the last observation. For the pollution
/// experiment this is the backward reconstruction.
fn format_trajectories(draws: &[Vec<Vec<f64>>], model: &TankModel, output: &OutputConfig) -> Result<String> {
    let picked = thinned_draws(draws, output.trajectory_draws);
    let layout = model.layout();
    let betas = picked
        .iter()
        .map(|flat| ParameterVector::from_flat(layout, flat))
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("experiment_id,draw,t,physics_level,predicted_level\n");
    let n_points = output.trajectory_points.max(2);
    for (k, exp) in model.dataset().experiments().iter().enumerate() {
        let t0_of = |b: &ParameterVector| match exp.kind {
            ExperimentKind::Pollution => b.pollution.t0,
            ExperimentKind::Calibration => b.calibration[k - 1].t0,
        };
        let t_lo = betas.iter().map(t0_of).fold(0.0f64, f64::min);
        let t_hi = exp.last_time().max(t_lo);
        let times: Vec<f64> = (0..n_points)
            .map(|i| t_lo + (t_hi - t_lo) * i as f64 / (n_points - 1) as f64)
            .collect();
        let curves = parallel::map(&betas, |b| physics_levels(b, model.dataset(), model.constants(), &exp.id, &times))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        for (d, (b, levels)) in betas.iter().zip(&curves).enumerate() {
            for (t, h) in times.iter().zip(levels) {
                let pred = h + b.discrepancy.value_at(h / b.geometry.h_max);
                let _ = writeln!(out, "{},{d},{t},{h},{pred}", exp.id);
            }
        }
    }
    Ok(out)
}

fn format_discrepancy(table: &DiscrepancyTable) -> String {
    let mut out = String::from("level,delta_mean,delta_lower_90,delta_upper_90\n");
    for p in &table.grid {
        let _ = writeln!(out, "{},{},{},{}", p.level, p.mean, p.lower_90, p.upper_90);
    }
    out
}

fn format_residuals(table: &DiscrepancyTable) -> String {
    let mut out = String::from("level_low,level_high,count,mean_residual\n");
    for b in &table.bins {
        let _ = writeln!(out, "{},{},{},{}", b.level_low, b.level_high, b.count, b.mean_residual);
    }
    out
}

/// Draws read back from a samples file.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub names: Vec<String>,
    pub chain_ids: Vec<usize>,
    /// `[chain][iteration][parameter]`, chains ordered by id.
    pub draws: Vec<Vec<Vec<f64>>>,
}

impl SampleTable {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn pooled(&self, index: usize) -> Vec<f64> {
        self.draws.iter().flatten().map(|d| d[index]).collect()
    }
}

pub fn load_samples(path: &Path) -> Result<SampleTable> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_samples(&text)
}

pub fn parse_samples(text: &str) -> Result<SampleTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| csv_parse_error(e, 1))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[..3] != ["chain", "iteration", "log_posterior"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected header 'chain,iteration,log_posterior,<parameters...>'".into(),
        });
    }
    let names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    let mut chains: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_parse_error(e, line)),
        }
        let line = record.position().map_or(line, |p| p.line());
        let chain: usize = record[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid chain id '{}'", &record[0]),
        })?;
        let values = record
            .iter()
            .skip(3)
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid number '{s}'"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        chains.entry(chain).or_default().push(values);
    }
    if chains.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "samples file has no draws".into(),
        });
    }
    Ok(SampleTable {
        names,
        chain_ids: chains.keys().copied().collect(),
        draws: chains.into_values().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalSummary {
    pub mean: f64,
    pub sd: f64,
    pub ci90_low: f64,
    pub ci90_high: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl MarginalSummary {
    fn from_samples(xs: &[f64]) -> Result<Self> {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let ci90 = credible_interval(xs, 0.9)?;
        let ci95 = credible_interval(xs, 0.95)?;
        Ok(Self {
            mean,
            sd,
            ci90_low: ci90.0,
            ci90_high: ci90.1,
            ci95_low: ci95.0,
            ci95_high: ci95.1,
        })
    }

    pub fn ci90_width(&self) -> f64 {
        self.ci90_high - self.ci90_low
    }

    pub fn ci90_contains(&self, x: f64) -> bool {
        (self.ci90_low..=self.ci90_high).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldOutComparison {
    pub t0: f64,
    pub h0: f64,
    pub h0_in_ci90: bool,
    pub h0_in_ci95: bool,
    pub t0_in_ci90: bool,
}

/// Posterior of the pollution event's start time and initial level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub experiment_id: String,
    pub observation_t: f64,
    pub observation_level: f64,
    pub n_draws: usize,
    pub t0: MarginalSummary,
    pub h0: MarginalSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation_t0_h0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out: Option<HeldOutComparison>,
    pub warnings: Vec<String>,
}

/// Summarize the pollution initial condition from a samples file and compare
/// it with the held-out truth when the dataset has one. Writes
/// `reconstruction.toml`.
pub fn cmd_reconstruct(config: &RunConfig, samples_path: &Path) -> Result<ReconstructionReport> {
    let samples = load_samples(samples_path)?;
    let dataset = load_dataset(&config.dataset_path(), &config.data)?;
    let report = reconstruct(&samples, &dataset)?;
    ensure_dir(&config.out_dir)?;
    write_file(&config.out_dir.join("reconstruction.toml"), &to_toml(&report)?)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

pub fn reconstruct(samples: &SampleTable, dataset: &Dataset) -> Result<ReconstructionReport> {
    let (Some(it0), Some(ih0)) = (samples.index_of("t0"), samples.index_of("h0")) else {
        return Err(Error::Dataset("samples lack the pollution parameters 't0' and 'h0'".into()));
    };
    let t0 = samples.pooled(it0);
    let h0 = samples.pooled(ih0);
    let mut warnings = Vec::new();
    if t0.len() < 2 {
        warnings.push(format!("only {} posterior draw(s); intervals are degenerate", t0.len()));
    }
    let correlation_t0_h0 = match posterior_correlation(&t0, &h0) {
        Ok(r) => Some(r),
        Err(e) => {
            warnings.push(format!("correlation of t0 and h0 unavailable: {e}"));
            None
        }
    };
    let t0s = MarginalSummary::from_samples(&t0)?;
    let h0s = MarginalSummary::from_samples(&h0)?;
    let pollution = dataset.pollution();
    let obs = pollution.observations[0];
    let held_out = pollution.held_out.map(|truth| HeldOutComparison {
        t0: truth.t,
        h0: truth.level,
        h0_in_ci90: h0s.ci90_contains(truth.level),
        h0_in_ci95: (h0s.ci95_low..=h0s.ci95_high).contains(&truth.level),
        t0_in_ci90: t0s.ci90_contains(truth.t),
    });
    Ok(ReconstructionReport {
        experiment_id: pollution.id.clone(),
        observation_t: obs.t,
        observation_level: obs.level,
        n_draws: t0.len(),
        t0: t0s,
        h0: h0s,
        correlation_t0_h0,
        held_out,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub parameter: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rhat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
    pub rhat_ok: bool,
    pub ess_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseReport {
    pub n_chains: usize,
    pub draws_per_chain: usize,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub healthy: bool,
    pub failures: Vec<String>,
    pub parameters: Vec<DiagnosticRow>,
}

/// R-hat and ESS per parameter against the health gates. Writes
/// `diagnostics.csv`, `diagnose.toml` and a long-format `trace.csv`.
pub fn cmd_diagnose(samples_path: &Path, out_dir: &Path) -> Result<DiagnoseReport> {
    let samples = load_samples(samples_path)?;
    let report = diagnose(&samples)?;
    ensure_dir(out_dir)?;
    let summary = PosteriorSummary::from_draws(&samples.names, &samples.draws)?;
    write_file(&out_dir.join("diagnostics.csv"), &format_diagnostics(&summary, &HealthGates::default()))?;
    write_file(&out_dir.join("diagnose.toml"), &to_toml(&report)?)?;
    let mut trace = String::from("chain,iteration,parameter,value\n");
    for (i, name) in samples.names.iter().enumerate() {
        for (chain, values) in samples.chain_ids.iter().zip(parameter_chains(&samples.draws, i)) {
            for (k, v) in values.iter().enumerate() {
                let _ = writeln!(trace, "{chain},{k},{name},{v}");
            }
        }
    }
    write_file(&out_dir.join("trace.csv"), &trace)?;
    Ok(report)
}

pub fn diagnose(samples: &SampleTable) -> Result<DiagnoseReport> {
    let gates = HealthGates::default();
    let summary = PosteriorSummary::from_draws(&samples.names, &samples.draws)?;
    let mut failures = summary.health_failures(&gates);
    if samples.draws.len() == 1 {
        failures.retain(|f| !f.ends_with("R-hat unavailable"));
        failures.insert(0, "single chain: R-hat unavailable".into());
    }
    let parameters = summary
        .parameters
        .iter()
        .map(|p| DiagnosticRow {
            parameter: p.name.clone(),
            rhat: p.rhat,
            ess: p.ess.map(|e| e.value),
            rhat_ok: p.rhat.is_some_and(|r| r <= gates.max_rhat),
            ess_ok: p.ess.is_some_and(|e| e.value >= gates.min_ess),
        })
        .collect();
    Ok(DiagnoseReport {
        n_chains: summary.n_chains,
        draws_per_chain: summary.draws_per_chain,
        max_rhat: gates.max_rhat,
        min_ess: gates.min_ess,
        healthy: failures.is_empty(),
        failures,
        parameters,
    })
}
