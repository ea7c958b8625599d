//! Convergence diagnostics and posterior summaries.
//!
//! Chain-level statistics take draws as `chains[chain][iteration]` for a
//! single scalar quantity. Summaries over the full parameter vector take
//! `chains[chain][iteration][parameter]` in constrained coordinates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{physics_levels, ExperimentKind, ParameterVector, TankModel};
use crate::parallel;
use crate::sampler::ChainTrace;

pub const MAX_RHAT: f64 = 1.05;
pub const MIN_ESS: f64 = 400.0;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Halve every chain, dropping the middle draw of odd-length chains and
/// truncating all chains to the shortest length.
fn split_chains(chains: &[Vec<f64>], min_half: usize) -> Result<Vec<&[f64]>> {
    if chains.is_empty() {
        return Err(Error::Diagnostic("no chains".into()));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    if half < min_half {
        return Err(Error::Diagnostic(format!(
            "need at least {} draws per chain, got {n}",
            2 * min_half
        )));
    }
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(&c[..half]);
        out.push(&c[n - half..n]);
    }
    Ok(out)
}

fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = chains.iter().map(|c| sample_variance(c)).sum::<f64>() / m;
    let between = n * sample_variance(&means);
    let var_plus = (n - 1.0) / n * within + between / n;
    (var_plus / within).sqrt()
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn rank_normalize(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let r = ranks(&pooled);
    let s = pooled.len() as f64;
    let normal = Normal::standard();
    let mut out = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        out.push(
            r[offset..offset + c.len()]
                .iter()
                .map(|ri| normal.inverse_cdf((ri - 0.375) / (s + 0.25)))
                .collect(),
        );
        offset += c.len();
    }
    out
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Rank-normalized split-R̂: the larger of the bulk and folded statistics.
///
/// Infinite when every split chain is constant but the chains disagree.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let halves = split_chains(chains, 2)?;
    let bulk = basic_rhat(&rank_normalize(&halves));
    let pooled: Vec<f64> = halves.iter().flat_map(|c| c.iter().copied()).collect();
    let med = median(&pooled);
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|x| (x - med).abs()).collect())
        .collect();
    let folded_refs: Vec<&[f64]> = folded.iter().map(Vec::as_slice).collect();
    let tail = basic_rhat(&rank_normalize(&folded_refs));
    Ok(bulk.max(tail))
}

/// Classic potential scale reduction on whole (unsplit) chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Diagnostic("Gelman-Rubin needs at least two chains".into()));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 2 {
        return Err(Error::Diagnostic(format!("need at least 2 draws per chain, got {n}")));
    }
    let trimmed: Vec<Vec<f64>> = chains.iter().map(|c| c[..n].to_vec()).collect();
    Ok(basic_rhat(&trimmed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub value: f64,
    /// The autocorrelation estimate implied more than `S·log10 S` draws (or
    /// a non-positive asymptotic variance) and the cap is reported instead.
    pub capped: bool,
}

fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain effective sample size on split chains, truncated by Geyer's
/// initial positive sequence and made monotone.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<EssEstimate> {
    let halves = split_chains(chains, 4)?;
    let m = halves.len();
    let n = halves[0].len();
    let total = (m * n) as f64;
    let cap = total * total.log10();

    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let acov = |lag: usize| -> f64 {
        halves
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocovariance(c, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let mean_var = acov(0) * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_variance(&means);
    }
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return Ok(EssEstimate {
            value: f64::NAN,
            capped: false,
        });
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho(1);
    rho_hat[1] = rho_odd;
    if rho_even + rho_odd <= 0.0 {
        return Ok(EssEstimate { value: cap, capped: true });
    }
    let mut s = 1;
    while s < n - 4 && rho_even + rho_odd > 0.0 {
        rho_even = rho(s + 1);
        rho_odd = rho(s + 2);
        if rho_even + rho_odd >= 0.0 {
            rho_hat[s + 1] = rho_even;
            rho_hat[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 {
        rho_hat[max_s + 1] = rho_even;
    }
    let mut k = 1;
    while k + 3 <= max_s {
        if rho_hat[k + 1] + rho_hat[k + 2] > rho_hat[k - 1] + rho_hat[k] {
            rho_hat[k + 1] = (rho_hat[k - 1] + rho_hat[k]) / 2.0;
            rho_hat[k + 2] = rho_hat[k + 1];
        }
        k += 2;
    }
    let tau = -1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + rho_hat[max_s + 1];
    let ess = total / tau;
    if tau <= 0.0 || ess > cap {
        Ok(EssEstimate { value: cap, capped: true })
    } else {
        Ok(EssEstimate {
            value: ess,
            capped: false,
        })
    }
}

/// Linear interpolation between order statistics with plotting positions
/// `(k − 0.5) / n`, clamped to the sample range.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 * p + 0.5).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

/// Empirical quantile at probability `p ∈ [0, 1]`.
pub fn quantile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Diagnostic("no samples".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("probability {p} outside [0, 1]")));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, p))
}

/// Equal-tailed interval holding `mass` of the samples.
pub fn credible_interval(samples: &[f64], mass: f64) -> Result<(f64, f64)> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::domain(format!("interval mass {mass} outside (0, 1]")));
    }
    if samples.is_empty() {
        return Err(Error::Diagnostic("no samples".into()));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - mass) / 2.0;
    Ok((quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail)))
}

/// Pearson correlation of paired draws.
pub fn posterior_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Diagnostic(format!(
            "correlation needs two equal-length series of at least 2 draws, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Diagnostic("correlation undefined for a zero-variance series".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Post-burn-in draws of every chain mapped back to constrained coordinates,
/// as `[chain][iteration][parameter]`.
pub fn constrained_draws(traces: &[ChainTrace], model: &TankModel) -> Result<Vec<Vec<Vec<f64>>>> {
    traces
        .iter()
        .map(|t| {
            t.kept_draws()
                .iter()
                .map(|z| Ok(model.from_unconstrained(z)?.to_flat()))
                .collect()
        })
        .collect()
}

/// One parameter's draws as `[chain][iteration]`.
pub fn parameter_chains(draws: &[Vec<Vec<f64>>], index: usize) -> Vec<Vec<f64>> {
    draws.iter().map(|c| c.iter().map(|d| d[index]).collect()).collect()
}

/// `n` draws spread evenly over the pooled chains (chain order, then time).
pub fn thinned_draws(draws: &[Vec<Vec<f64>>], n: usize) -> Vec<&[f64]> {
    let pooled: Vec<&[f64]> = draws.iter().flat_map(|c| c.iter().map(Vec::as_slice)).collect();
    if n == 0 || pooled.is_empty() {
        return Vec::new();
    }
    if n >= pooled.len() {
        return pooled;
    }
    (0..n).map(|k| pooled[k * pooled.len() / n]).collect()
}

/// Mean absolute residual of the noise-free prediction for one posterior draw.
fn draw_mae(model: &TankModel, beta: &ParameterVector, id: &str) -> Result<f64> {
    let exp = model.dataset().experiment(id).expect("checked by caller");
    let times: Vec<f64> = exp.observations.iter().map(|o| o.t).collect();
    let levels = physics_levels(beta, model.dataset(), model.constants(), id, &times)?;
    let h_max = beta.geometry.h_max;
    let total: f64 = exp
        .observations
        .iter()
        .zip(&levels)
        .map(|(o, &h)| (o.level - (h + beta.discrepancy.value_at(h / h_max))).abs())
        .sum();
    Ok(total / exp.observations.len() as f64)
}

/// Posterior-averaged mean absolute error between a calibration series and
/// the predicted observation mean, over `n_posterior_draws` thinned draws.
pub fn trajectory_mae(
    draws: &[Vec<Vec<f64>>],
    model: &TankModel,
    experiment_id: &str,
    n_posterior_draws: usize,
) -> Result<f64> {
    let exp = model
        .dataset()
        .experiment(experiment_id)
        .ok_or_else(|| Error::Diagnostic(format!("no experiment '{experiment_id}'")))?;
    if exp.kind == ExperimentKind::Pollution {
        return Err(Error::Diagnostic(format!(
            "'{experiment_id}' is the single-point pollution experiment; inspect its residual instead"
        )));
    }
    let picked = thinned_draws(draws, n_posterior_draws);
    if picked.is_empty() {
        return Err(Error::Diagnostic("no posterior draws".into()));
    }
    let layout = model.layout();
    let maes = parallel::map(&picked, |flat| {
        let beta = ParameterVector::from_flat(layout, flat)?;
        draw_mae(model, &beta, experiment_id)
    });
    let maes = maes.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(mean(&maes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBin {
    pub level_low: f64,
    pub level_high: f64,
    pub count: usize,
    /// Mean of `observed − posterior-mean physics level` in this bin (NaN when empty).
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyPoint {
    pub level: f64,
    pub mean: f64,
    pub lower_90: f64,
    pub upper_90: f64,
}

/// Posterior discrepancy on a level grid next to binned calibration residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyTable {
    pub h_max: f64,
    pub grid: Vec<DiscrepancyPoint>,
    pub bins: Vec<ResidualBin>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscrepancyTableOptions {
    pub grid_points: usize,
    pub bins: usize,
    pub n_posterior_draws: usize,
}

impl Default for DiscrepancyTableOptions {
    fn default() -> Self {
        Self {
            grid_points: 29,
            bins: 14,
            n_posterior_draws: 400,
        }
    }
}

/// Discrepancy samples on `[0, ĥ_max]` (posterior-mean tank height, endpoints
/// included) and calibration residuals against the posterior-mean physics
/// level, binned by that level.
pub fn discrepancy_vs_residuals(
    draws: &[Vec<Vec<f64>>],
    model: &TankModel,
    options: &DiscrepancyTableOptions,
) -> Result<DiscrepancyTable> {
    let picked = thinned_draws(draws, options.n_posterior_draws);
    if picked.is_empty() {
        return Err(Error::Diagnostic("no posterior draws".into()));
    }
    if options.grid_points < 2 || options.bins == 0 {
        return Err(Error::Config("discrepancy table needs ≥ 2 grid points and ≥ 1 bin".into()));
    }
    let layout = model.layout();
    let betas = picked
        .iter()
        .map(|flat| ParameterVector::from_flat(layout, flat))
        .collect::<Result<Vec<_>>>()?;
    let h_max = mean(&betas.iter().map(|b| b.geometry.h_max).collect::<Vec<_>>());

    let grid = (0..options.grid_points)
        .map(|i| {
            let level = h_max * i as f64 / (options.grid_points - 1) as f64;
            let deltas: Vec<f64> = betas
                .iter()
                .map(|b| b.discrepancy.value_at(level / b.geometry.h_max))
                .collect();
            let (lower_90, upper_90) = credible_interval(&deltas, 0.9)?;
            Ok(DiscrepancyPoint {
                level,
                mean: mean(&deltas),
                lower_90,
                upper_90,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let width = h_max / options.bins as f64;
    let mut sums = vec![0.0; options.bins];
    let mut counts = vec![0usize; options.bins];
    for exp in model.dataset().calibration() {
        let times: Vec<f64> = exp.observations.iter().map(|o| o.t).collect();
        let per_draw = parallel::map(&betas, |beta| {
            physics_levels(beta, model.dataset(), model.constants(), &exp.id, &times)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (i, obs) in exp.observations.iter().enumerate() {
            let h = per_draw.iter().map(|levels| levels[i]).sum::<f64>() / per_draw.len() as f64;
            let bin = ((h / width).floor().max(0.0) as usize).min(options.bins - 1);
            sums[bin] += obs.level - h;
            counts[bin] += 1;
        }
    }
    let bins = (0..options.bins)
        .map(|k| ResidualBin {
            level_low: k as f64 * width,
            level_high: (k + 1) as f64 * width,
            count: counts[k],
            mean_residual: if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::NAN },
        })
        .collect();
    Ok(DiscrepancyTable { h_max, grid, bins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub ci90: (f64, f64),
    pub ci95: (f64, f64),
    /// Unavailable for a single chain or too few draws.
    pub rhat: Option<f64>,
    pub ess: Option<EssEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_chains: usize,
    pub draws_per_chain: usize,
    pub parameters: Vec<ParameterSummary>,
    /// Pearson correlations between parameters, NaN where undefined.
    pub correlation: Vec<Vec<f64>>,
    /// Trajectory MAE per calibration experiment.
    pub mae: Vec<(String, f64)>,
}

/// Thresholds a fit must meet to be reported healthy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthGates {
    pub max_rhat: f64,
    pub min_ess: f64,
    /// Allowed post-burn-in acceptance band, when checked.
    pub acceptance: Option<(f64, f64)>,
}

impl Default for HealthGates {
    fn default() -> Self {
        Self {
            max_rhat: MAX_RHAT,
            min_ess: MIN_ESS,
            acceptance: None,
        }
    }
}

impl PosteriorSummary {
    /// Summaries of `draws[chain][iteration][parameter]`.
    pub fn from_draws(names: &[String], draws: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n_chains = draws.len();
        let draws_per_chain = draws.iter().map(Vec::len).min().unwrap_or(0);
        if draws_per_chain == 0 {
            return Err(Error::Diagnostic("no posterior draws".into()));
        }
        if let Some(bad) = draws.iter().flatten().find(|d| d.len() != names.len()) {
            return Err(Error::Diagnostic(format!(
                "draw has {} values for {} parameters",
                bad.len(),
                names.len()
            )));
        }
        let pooled: Vec<Vec<f64>> = (0..names.len())
            .map(|i| draws.iter().flatten().map(|d| d[i]).collect())
            .collect();
        let parameters = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let xs = &pooled[i];
                let chains = parameter_chains(draws, i);
                let m = mean(xs);
                let sd = if xs.len() > 1 { sample_variance(xs).sqrt() } else { 0.0 };
                Ok(ParameterSummary {
                    name: name.clone(),
                    mean: m,
                    sd,
                    ci90: credible_interval(xs, 0.9)?,
                    ci95: credible_interval(xs, 0.95)?,
                    rhat: if n_chains > 1 { split_rhat(&chains).ok() } else { None },
                    ess: effective_sample_size(&chains).ok(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let correlation = (0..names.len())
            .map(|i| {
                (0..names.len())
                    .map(|j| posterior_correlation(&pooled[i], &pooled[j]).unwrap_or(f64::NAN))
                    .collect()
            })
            .collect();
        Ok(Self {
            n_chains,
            draws_per_chain,
            parameters,
            correlation,
            mae: Vec::new(),
        })
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn correlation_between(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.parameters.iter().position(|p| p.name == a)?;
        let j = self.parameters.iter().position(|p| p.name == b)?;
        Some(self.correlation[i][j])
    }

    /// Human-readable gate violations; empty when the fit is healthy.
    pub fn health_failures(&self, gates: &HealthGates) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.parameters {
            match p.rhat {
                Some(r) if r <= gates.max_rhat => {}
                Some(r) => out.push(format!("{}: R-hat {r:.4} > {}", p.name, gates.max_rhat)),
                None => out.push(format!("{}: R-hat unavailable", p.name)),
            }
            match p.ess {
                Some(e) if e.value >= gates.min_ess => {}
                Some(e) => out.push(format!("{}: ESS {:.1} < {}", p.name, e.value, gates.min_ess)),
                None => out.push(format!("{}: ESS unavailable", p.name)),
            }
        }
        out
    }
}

/// Acceptance-rate gate violations per chain.
pub fn acceptance_failures(traces: &[ChainTrace], band: (f64, f64)) -> Vec<String> {
    traces
        .iter()
        .filter_map(|t| {
            let a = t.acceptance_rate();
            (!(band.0..=band.1).contains(&a))
                .then(|| format!("chain {}: acceptance rate {a:.3} outside [{}, {}]", t.chain_id, band.0, band.1))
        })
        .collect()
}
