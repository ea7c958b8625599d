//! Joint prior, likelihood and unnormalized posterior over the tank parameters,
//! the discrepancy coefficients, the noise level and every experiment's initial
//! condition.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::discrepancy::DiscrepancyCoefficients;
use crate::error::{Error, Result};
use crate::forward::{
    integrate, sensitivity_with, Dynamics, InitialCondition, LevelSensitivity, LevelTrajectory,
    Orifice, PhysicalConstants, TankGeometry,
};
use crate::sampler::LogDensity;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// A univariate prior distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    Beta { alpha: f64, beta: f64 },
    /// Exponential parameterized by its rate (mean = 1 / rate).
    Exponential { rate: f64 },
    /// Exponential parameterized by its scale (mean = scale).
    ExponentialScale { scale: f64 },
    Laplace { location: f64, scale: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let ok = match *self {
            Prior::Normal { mean, sd } => mean.is_finite() && pos(sd),
            Prior::Beta { alpha, beta } => pos(alpha) && pos(beta),
            Prior::Exponential { rate } => pos(rate),
            Prior::ExponentialScale { scale } => pos(scale),
            Prior::Laplace { location, scale } => location.is_finite() && pos(scale),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior hyperparameters {self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Prior::Normal { mean, .. } => mean,
            Prior::Beta { alpha, beta } => alpha / (alpha + beta),
            Prior::Exponential { rate } => 1.0 / rate,
            Prior::ExponentialScale { scale } => scale,
            Prior::Laplace { location, .. } => location,
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            Prior::Beta { alpha, beta } => {
                if x <= 0.0 || x >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_beta(alpha, beta)
            }
            Prior::Exponential { rate } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    rate.ln() - rate * x
                }
            }
            Prior::ExponentialScale { scale } => Prior::Exponential { rate: 1.0 / scale }.log_density(x),
            Prior::Laplace { location, scale } => -(x - location).abs() / scale - (2.0 * scale).ln(),
        }
    }

    /// d log p / dx inside the support.
    pub fn grad_log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => -(x - mean) / (sd * sd),
            Prior::Beta { alpha, beta } => (alpha - 1.0) / x - (beta - 1.0) / (1.0 - x),
            Prior::Exponential { rate } => -rate,
            Prior::ExponentialScale { scale } => -1.0 / scale,
            Prior::Laplace { location, scale } => {
                if x > location {
                    -1.0 / scale
                } else if x < location {
                    1.0 / scale
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Prior::Beta { alpha, beta } => Beta::new(alpha, beta)
                .expect("validated beta prior")
                .sample(rng),
            Prior::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(rng),
            Prior::ExponentialScale { scale } => {
                Exp::new(1.0 / scale).expect("validated scale").sample(rng)
            }
            Prior::Laplace { location, scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                location - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }
}

/// Prior configuration for every component of the parameter vector.
///
/// The pollution initial level is always `Uniform(0, h_max)` given the sampled
/// tank height, and each calibration initial level is `Normal(mean, σ²)` given
/// the sampled noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub h_max: Prior,
    pub x_t: Prior,
    pub x_b: Prior,
    pub radius: Prior,
    pub discharge: Prior,
    pub sigma: Prior,
    /// Shared by every discrepancy coefficient.
    pub discrepancy: Prior,
    pub pollution_t0: Prior,
    pub calibration_t0: Prior,
    pub calibration_h0_mean: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        default_prior_spec()
    }
}

pub fn default_prior_spec() -> PriorSpec {
    PriorSpec {
        h_max: Prior::Normal { mean: 14.0, sd: 0.1 },
        x_t: Prior::Normal { mean: 8.7, sd: 0.1 },
        x_b: Prior::Normal { mean: 8.4, sd: 0.1 },
        radius: Prior::Normal {
            mean: 0.12,
            sd: 0.05 * 0.12,
        },
        discharge: Prior::Beta {
            alpha: 6.0,
            beta: 4.0,
        },
        sigma: Prior::Exponential { rate: 4.0 },
        discrepancy: Prior::Laplace {
            location: 0.0,
            scale: 0.25,
        },
        pollution_t0: Prior::Normal { mean: 0.0, sd: 5.0 },
        calibration_t0: Prior::Normal { mean: 0.0, sd: 0.25 },
        calibration_h0_mean: 14.0,
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for p in [
            &self.h_max,
            &self.x_t,
            &self.x_b,
            &self.radius,
            &self.discharge,
            &self.sigma,
            &self.discrepancy,
            &self.pollution_t0,
            &self.calibration_t0,
        ] {
            p.validate()?;
        }
        if !self.calibration_h0_mean.is_finite() {
            return Err(Error::Config("calibration_h0_mean must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Pollution,
    Calibration,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Pollution => "pollution",
            ExperimentKind::Calibration => "calibration",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Time (s).
    pub t: f64,
    /// Observed level (cm).
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub id: String,
    pub kind: ExperimentKind,
    pub observations: Vec<Observation>,
    /// Calibration observations at or below this level were dropped.
    pub level_cutoff: f64,
    /// Validation point kept out of the likelihood.
    pub held_out: Option<Observation>,
}

impl Experiment {
    /// Builds an experiment, dropping calibration observations at or below
    /// `level_cutoff`.
    pub fn new(
        id: impl Into<String>,
        kind: ExperimentKind,
        observations: Vec<Observation>,
        level_cutoff: f64,
        held_out: Option<Observation>,
    ) -> Result<Self> {
        let id = id.into();
        let observations: Vec<Observation> = match kind {
            ExperimentKind::Calibration => observations
                .into_iter()
                .filter(|o| o.level > level_cutoff)
                .collect(),
            ExperimentKind::Pollution => observations,
        };
        let exp = Self {
            id,
            kind,
            observations,
            level_cutoff,
            held_out,
        };
        exp.validate()?;
        Ok(exp)
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Dataset("empty experiment id".into()));
        }
        match self.kind {
            ExperimentKind::Pollution if self.observations.len() != 1 => {
                return Err(Error::Dataset(format!(
                    "pollution experiment '{}' must have exactly one observation, found {}",
                    self.id,
                    self.observations.len()
                )))
            }
            ExperimentKind::Calibration if self.observations.is_empty() => {
                return Err(Error::Dataset(format!(
                    "calibration experiment '{}' has no observations",
                    self.id
                )))
            }
            _ => {}
        }
        for o in &self.observations {
            if !(o.t.is_finite() && o.t >= 0.0 && o.level.is_finite()) {
                return Err(Error::Dataset(format!(
                    "experiment '{}': invalid observation {o:?}",
                    self.id
                )));
            }
        }
        if let Some(w) = self.observations.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Dataset(format!(
                "experiment '{}': observation times must increase ({} then {})",
                self.id, w[0].t, w[1].t
            )));
        }
        Ok(())
    }

    pub fn last_time(&self) -> f64 {
        self.observations.last().map_or(0.0, |o| o.t)
    }
}

/// Pooled observations: one pollution experiment and any number of calibration
/// experiments, kept sorted by experiment id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    experiments: Vec<Experiment>,
}

impl Dataset {
    pub fn new(mut experiments: Vec<Experiment>) -> Result<Self> {
        let n_pollution = experiments
            .iter()
            .filter(|e| e.kind == ExperimentKind::Pollution)
            .count();
        if n_pollution != 1 {
            return Err(Error::Dataset(format!(
                "expected exactly one pollution experiment, found {n_pollution}"
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &experiments {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate experiment id '{}'", e.id)));
            }
        }
        experiments.sort_by(|a, b| (a.kind, &a.id).cmp(&(b.kind, &b.id)));
        Ok(Self { experiments })
    }

    pub fn experiments(&self) -> &[Experiment] {
        &self.experiments
    }

    pub fn pollution(&self) -> &Experiment {
        &self.experiments[0]
    }

    pub fn calibration(&self) -> &[Experiment] {
        &self.experiments[1..]
    }

    pub fn calibration_ids(&self) -> Vec<String> {
        self.calibration().iter().map(|e| e.id.clone()).collect()
    }

    pub fn experiment(&self, id: &str) -> Option<&Experiment> {
        self.experiments.iter().find(|e| e.id == id)
    }

    pub fn n_observations(&self) -> usize {
        self.experiments.iter().map(|e| e.observations.len()).sum()
    }
}

/// Names and flat positions of the parameter vector components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterLayout {
    degree: usize,
    calibration_ids: Vec<String>,
}

pub(crate) const IDX_H_MAX: usize = 0;
pub(crate) const IDX_X_T: usize = 1;
pub(crate) const IDX_X_B: usize = 2;
pub(crate) const IDX_C: usize = 3;
pub(crate) const IDX_R: usize = 4;
const IDX_A0: usize = 5;

impl ParameterLayout {
    pub fn new(degree: usize, calibration_ids: Vec<String>) -> Self {
        Self {
            degree,
            calibration_ids,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn calibration_ids(&self) -> &[String] {
        &self.calibration_ids
    }

    pub fn dim(&self) -> usize {
        IDX_A0 + self.degree + 1 + 3 + 2 * self.calibration_ids.len()
    }

    pub fn discrepancy_index(&self, nu: usize) -> usize {
        IDX_A0 + nu
    }

    pub fn sigma_index(&self) -> usize {
        IDX_A0 + self.degree + 1
    }

    pub fn pollution_t0_index(&self) -> usize {
        self.sigma_index() + 1
    }

    pub fn pollution_h0_index(&self) -> usize {
        self.sigma_index() + 2
    }

    pub fn calibration_t0_index(&self, k: usize) -> usize {
        self.sigma_index() + 3 + 2 * k
    }

    pub fn calibration_h0_index(&self, k: usize) -> usize {
        self.calibration_t0_index(k) + 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["h_max", "x_t", "x_b", "c", "r"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((0..=self.degree).map(|nu| format!("a_{nu}")));
        names.extend(["sigma", "t0", "h0"].iter().map(|s| s.to_string()));
        for id in &self.calibration_ids {
            names.push(format!("t0_{id}"));
            names.push(format!("h0_{id}"));
        }
        names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }
}

/// Full inference state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub geometry: TankGeometry,
    pub orifice: Orifice,
    pub discrepancy: DiscrepancyCoefficients,
    /// Observation noise standard deviation (cm).
    pub sigma: f64,
    pub pollution: InitialCondition,
    /// One per calibration experiment, in sorted id order.
    pub calibration: Vec<InitialCondition>,
}

impl ParameterVector {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = vec![
            self.geometry.h_max,
            self.geometry.x_t,
            self.geometry.x_b,
            self.orifice.discharge,
            self.orifice.radius,
        ];
        v.extend_from_slice(self.discrepancy.as_slice());
        v.extend([self.sigma, self.pollution.t0, self.pollution.h0]);
        for ic in &self.calibration {
            v.extend([ic.t0, ic.h0]);
        }
        v
    }

    pub fn from_flat(layout: &ParameterLayout, v: &[f64]) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(Error::domain(format!(
                "expected {} parameters, got {}",
                layout.dim(),
                v.len()
            )));
        }
        let s = layout.sigma_index();
        Ok(Self {
            geometry: TankGeometry {
                h_max: v[IDX_H_MAX],
                x_t: v[IDX_X_T],
                x_b: v[IDX_X_B],
            },
            orifice: Orifice {
                discharge: v[IDX_C],
                radius: v[IDX_R],
            },
            discrepancy: DiscrepancyCoefficients::new(v[IDX_A0..s].to_vec())?,
            sigma: v[s],
            pollution: InitialCondition::new(v[s + 1], v[s + 2]),
            calibration: (0..layout.calibration_ids.len())
                .map(|k| {
                    InitialCondition::new(
                        v[layout.calibration_t0_index(k)],
                        v[layout.calibration_h0_index(k)],
                    )
                })
                .collect(),
        })
    }

    fn in_support(&self) -> bool {
        let g = &self.geometry;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        pos(g.h_max)
            && pos(g.x_t)
            && pos(g.x_b)
            && pos(self.orifice.radius)
            && self.orifice.discharge > 0.0
            && self.orifice.discharge < 1.0
            && pos(self.sigma)
            && self.pollution.t0.is_finite()
            && (0.0..=g.h_max).contains(&self.pollution.h0)
            && self
                .calibration
                .iter()
                .all(|ic| ic.t0.is_finite() && ic.h0.is_finite() && ic.h0 >= 0.0)
    }
}

/// Joint log prior density. Support violations give `-inf`.
pub fn log_prior(beta: &ParameterVector, spec: &PriorSpec) -> f64 {
    log_prior_impl(beta, spec, None)
}

fn log_prior_impl(beta: &ParameterVector, spec: &PriorSpec, mut grad: Option<&mut [f64]>) -> f64 {
    if !beta.in_support() {
        return f64::NEG_INFINITY;
    }
    let flat = beta.to_flat();
    let n_a = beta.discrepancy.as_slice().len();
    let s = IDX_A0 + n_a;
    let mut lp = 0.0;
    let mut term = |i: usize, prior: &Prior, lp: &mut f64| {
        *lp += prior.log_density(flat[i]);
        if let Some(g) = grad.as_deref_mut() {
            g[i] += prior.grad_log_density(flat[i]);
        }
    };
    term(IDX_H_MAX, &spec.h_max, &mut lp);
    term(IDX_X_T, &spec.x_t, &mut lp);
    term(IDX_X_B, &spec.x_b, &mut lp);
    term(IDX_C, &spec.discharge, &mut lp);
    term(IDX_R, &spec.radius, &mut lp);
    for i in IDX_A0..s {
        term(i, &spec.discrepancy, &mut lp);
    }
    term(s, &spec.sigma, &mut lp);
    term(s + 1, &spec.pollution_t0, &mut lp);
    for k in 0..beta.calibration.len() {
        term(s + 3 + 2 * k, &spec.calibration_t0, &mut lp);
    }

    // h0 | h_max ~ U(0, h_max)
    let h_max = beta.geometry.h_max;
    lp -= h_max.ln();
    // h0^(k) | σ ~ N(μ, σ²)
    let sigma = beta.sigma;
    let mu = spec.calibration_h0_mean;
    for ic in &beta.calibration {
        let z = (ic.h0 - mu) / sigma;
        lp += -0.5 * z * z - sigma.ln() - LN_SQRT_2PI;
    }
    if let Some(g) = grad {
        g[IDX_H_MAX] -= 1.0 / h_max;
        for (k, ic) in beta.calibration.iter().enumerate() {
            let d = ic.h0 - mu;
            g[s + 4 + 2 * k] -= d / (sigma * sigma);
            g[s] += -1.0 / sigma + d * d / (sigma * sigma * sigma);
        }
    }
    lp
}

/// Solved level trajectory and parameters for one experiment.
struct ExperimentSolution<'a> {
    ic: InitialCondition,
    dynamics: Dynamics,
    beta: &'a ParameterVector,
    constants: &'a PhysicalConstants,
    traj: Option<LevelTrajectory>,
}

impl<'a> ExperimentSolution<'a> {
    fn solve(
        beta: &'a ParameterVector,
        constants: &'a PhysicalConstants,
        ic: InitialCondition,
        t_end: f64,
    ) -> Result<Self> {
        let dynamics = Dynamics::new(&beta.geometry, &beta.orifice, constants);
        let traj = if t_end > ic.t0 {
            if dynamics.x_b + dynamics.slope * ic.h0 <= 0.0 {
                return Err(Error::domain("tank walls meet below the initial level"));
            }
            Some(integrate(&dynamics, &ic, t_end)?)
        } else {
            None
        };
        Ok(Self {
            ic,
            dynamics,
            beta,
            constants,
            traj,
        })
    }

    /// Physics-only level; constant at `h0` before the drain starts.
    fn physics_level(&self, t: f64) -> Result<f64> {
        match &self.traj {
            Some(traj) if t > self.ic.t0 => traj.level_at(t),
            _ => Ok(self.ic.h0),
        }
    }

    fn sensitivity(&self, t: f64, h: f64) -> LevelSensitivity {
        if t > self.ic.t0 {
            sensitivity_with(
                &self.dynamics,
                &self.beta.geometry,
                &self.beta.orifice,
                self.constants,
                &self.ic,
                t,
                h,
            )
        } else {
            LevelSensitivity {
                h0: 1.0,
                ..Default::default()
            }
        }
    }
}

fn initial_condition_for(beta: &ParameterVector, dataset: &Dataset, id: &str) -> Result<InitialCondition> {
    let exp = dataset
        .experiment(id)
        .ok_or_else(|| Error::Dataset(format!("unknown experiment '{id}'")))?;
    match exp.kind {
        ExperimentKind::Pollution => Ok(beta.pollution),
        ExperimentKind::Calibration => {
            let k = dataset
                .calibration()
                .iter()
                .position(|e| e.id == id)
                .expect("calibration experiment present");
            beta.calibration.get(k).copied().ok_or_else(|| {
                Error::domain(format!("parameter vector lacks an initial condition for '{id}'"))
            })
        }
    }
}

/// Physics level plus discrepancy at time `t` for experiment `id`.
pub fn predicted_observation_mean(
    beta: &ParameterVector,
    dataset: &Dataset,
    constants: &PhysicalConstants,
    id: &str,
    t: f64,
) -> Result<f64> {
    let ic = initial_condition_for(beta, dataset, id)?;
    let sol = ExperimentSolution::solve(beta, constants, ic, t)?;
    let h = sol.physics_level(t)?;
    Ok(h + beta.discrepancy.value_at(h / beta.geometry.h_max))
}

/// Physics-only level (no discrepancy) at each of `times` for experiment `id`.
pub fn physics_levels(
    beta: &ParameterVector,
    dataset: &Dataset,
    constants: &PhysicalConstants,
    id: &str,
    times: &[f64],
) -> Result<Vec<f64>> {
    let ic = initial_condition_for(beta, dataset, id)?;
    let t_end = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sol = ExperimentSolution::solve(beta, constants, ic, t_end)?;
    times.iter().map(|&t| sol.physics_level(t)).collect()
}

/// Gaussian log likelihood of every non-held-out observation.
pub fn log_likelihood(beta: &ParameterVector, dataset: &Dataset, constants: &PhysicalConstants) -> f64 {
    log_likelihood_impl(beta, dataset, constants, None)
}

/// Per-experiment log likelihoods, in dataset order.
pub fn experiment_log_likelihoods(
    beta: &ParameterVector,
    dataset: &Dataset,
    constants: &PhysicalConstants,
) -> Vec<f64> {
    dataset
        .experiments()
        .iter()
        .enumerate()
        .map(|(i, exp)| experiment_log_likelihood(beta, constants, i, exp, None))
        .collect()
}

fn log_likelihood_impl(
    beta: &ParameterVector,
    dataset: &Dataset,
    constants: &PhysicalConstants,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    if !(beta.sigma.is_finite() && beta.sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for (i, exp) in dataset.experiments().iter().enumerate() {
        total += experiment_log_likelihood(beta, constants, i, exp, grad.as_deref_mut());
        if total == f64::NEG_INFINITY {
            return total;
        }
    }
    total
}

fn experiment_log_likelihood(
    beta: &ParameterVector,
    constants: &PhysicalConstants,
    index: usize,
    exp: &Experiment,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    if exp.observations.is_empty() {
        return 0.0;
    }
    // experiments are sorted with the pollution experiment first
    let (ic, calibration_slot) = match exp.kind {
        ExperimentKind::Pollution => (beta.pollution, None),
        ExperimentKind::Calibration => {
            let k = index - 1;
            let Some(ic) = beta.calibration.get(k) else {
                log::warn!("no initial condition for experiment '{}'", exp.id);
                return f64::NEG_INFINITY;
            };
            (*ic, Some(k))
        }
    };
    let sol = match ExperimentSolution::solve(beta, constants, ic, exp.last_time()) {
        Ok(sol) => sol,
        Err(e) => {
            log::warn!("forward solve failed for '{}': {e}", exp.id);
            return f64::NEG_INFINITY;
        }
    };

    let sigma = beta.sigma;
    let h_max = beta.geometry.h_max;
    let n_a = beta.discrepancy.as_slice().len();
    let s_idx = IDX_A0 + n_a;
    let mut basis = vec![0.0; n_a];
    let mut ll = 0.0;
    for obs in &exp.observations {
        let h = match sol.physics_level(obs.t) {
            Ok(h) => h,
            Err(e) => {
                log::warn!("level lookup failed for '{}': {e}", exp.id);
                return f64::NEG_INFINITY;
            }
        };
        let u = h / h_max;
        let mean = h + beta.discrepancy.value_at(u);
        let r = obs.level - mean;
        let z = r / sigma;
        ll += -0.5 * z * z - sigma.ln() - LN_SQRT_2PI;

        if let Some(g) = grad.as_deref_mut() {
            let d_mean = r / (sigma * sigma);
            g[s_idx] += -1.0 / sigma + r * r / (sigma * sigma * sigma);

            let slope = beta.discrepancy.slope_at(u);
            beta.discrepancy.basis_at(u, &mut basis);
            for (nu, b) in basis.iter().enumerate() {
                g[IDX_A0 + nu] += d_mean * b;
            }
            let d_mean_d_h = 1.0 + slope / h_max;
            g[IDX_H_MAX] += d_mean * slope * (-h / (h_max * h_max));

            let sens = sol.sensitivity(obs.t, h);
            let w = d_mean * d_mean_d_h;
            g[IDX_H_MAX] += w * sens.h_max;
            g[IDX_X_T] += w * sens.x_t;
            g[IDX_X_B] += w * sens.x_b;
            g[IDX_C] += w * sens.discharge;
            g[IDX_R] += w * sens.radius;
            let (it0, ih0) = match calibration_slot {
                Some(k) => (s_idx + 3 + 2 * k, s_idx + 4 + 2 * k),
                None => (s_idx + 1, s_idx + 2),
            };
            g[it0] += w * sens.t0;
            g[ih0] += w * sens.h0;
        }
    }
    ll
}

/// `log p(β) + log p(D | β)`; the likelihood is skipped outside the prior support.
pub fn log_posterior_unnorm(
    beta: &ParameterVector,
    dataset: &Dataset,
    spec: &PriorSpec,
    constants: &PhysicalConstants,
) -> f64 {
    let lp = log_prior(beta, spec);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + log_likelihood(beta, dataset, constants)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `log(s (1 - s))` for `s = sigmoid(z)`.
#[inline]
fn log_sigmoid_jacobian(z: f64) -> f64 {
    -softplus(-z) - softplus(z)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Map `β` to the sampler's unconstrained space.
///
/// `σ ↦ log σ`, `c ↦ logit c`, pollution `h0 ↦ logit(h0 / h_max)`, identity
/// elsewhere. Also returns `log |∂β/∂z|` at the image.
pub fn to_unconstrained(beta: &ParameterVector, layout: &ParameterLayout) -> Result<(Vec<f64>, f64)> {
    let mut z = beta.to_flat();
    if z.len() != layout.dim() {
        return Err(Error::domain("parameter vector does not match layout"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite parameter"));
    }
    let c = beta.orifice.discharge;
    let sigma = beta.sigma;
    let h_max = beta.geometry.h_max;
    let frac = beta.pollution.h0 / h_max;
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::domain(format!("discharge {c} outside (0, 1)")));
    }
    if sigma <= 0.0 {
        return Err(Error::domain(format!("sigma {sigma} must be positive")));
    }
    if !(h_max > 0.0 && frac > 0.0 && frac < 1.0) {
        return Err(Error::domain(format!(
            "pollution level {} outside (0, {h_max})",
            beta.pollution.h0
        )));
    }
    z[IDX_C] = logit(c);
    z[layout.sigma_index()] = sigma.ln();
    z[layout.pollution_h0_index()] = logit(frac);
    let log_jac = log_jacobian(&z, layout);
    Ok((z, log_jac))
}

fn log_jacobian(z: &[f64], layout: &ParameterLayout) -> f64 {
    log_sigmoid_jacobian(z[IDX_C])
        + z[layout.sigma_index()]
        + z[IDX_H_MAX].ln()
        + log_sigmoid_jacobian(z[layout.pollution_h0_index()])
}

/// Inverse of [`to_unconstrained`].
pub fn from_unconstrained(z: &[f64], layout: &ParameterLayout) -> Result<ParameterVector> {
    if z.len() != layout.dim() {
        return Err(Error::domain(format!(
            "expected {} coordinates, got {}",
            layout.dim(),
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite unconstrained coordinate"));
    }
    let mut v = z.to_vec();
    v[IDX_C] = sigmoid(z[IDX_C]);
    v[layout.sigma_index()] = z[layout.sigma_index()].exp();
    v[layout.pollution_h0_index()] = z[IDX_H_MAX] * sigmoid(z[layout.pollution_h0_index()]);
    ParameterVector::from_flat(layout, &v)
}

/// Draw `β` from the joint prior.
pub fn sample_prior<R: Rng + ?Sized>(rng: &mut R, spec: &PriorSpec, layout: &ParameterLayout) -> ParameterVector {
    let h_max = spec.h_max.sample(rng);
    let x_t = spec.x_t.sample(rng);
    let x_b = spec.x_b.sample(rng);
    let discharge = spec.discharge.sample(rng);
    let radius = spec.radius.sample(rng);
    let a: Vec<f64> = (0..=layout.degree).map(|_| spec.discrepancy.sample(rng)).collect();
    let sigma = spec.sigma.sample(rng);
    let t0 = spec.pollution_t0.sample(rng);
    let h0 = h_max * rng.random::<f64>();
    let calibration = layout
        .calibration_ids
        .iter()
        .map(|_| {
            let t0 = spec.calibration_t0.sample(rng);
            let z: f64 = StandardNormal.sample(rng);
            InitialCondition::new(t0, spec.calibration_h0_mean + sigma * z)
        })
        .collect();
    ParameterVector {
        geometry: TankGeometry { h_max, x_t, x_b },
        orifice: Orifice { radius, discharge },
        discrepancy: DiscrepancyCoefficients::new(a).expect("finite prior draws"),
        sigma,
        pollution: InitialCondition::new(t0, h0),
        calibration,
    }
}

/// Observation schedule for one synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDesign {
    pub id: String,
    pub kind: ExperimentKind,
    /// Observation times (s).
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDesign {
    pub experiments: Vec<ExperimentDesign>,
    /// Calibration observations at or below this level are dropped.
    #[serde(default)]
    pub level_cutoff: f64,
}

/// Synthesize observations from `β` with i.i.d. `N(0, σ²)` noise.
///
/// The pollution experiment's true initial condition is stored as its
/// held-out point. Calibration initial conditions are matched to calibration
/// designs in sorted id order.
pub fn simulate_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    beta: &ParameterVector,
    design: &DatasetDesign,
    constants: &PhysicalConstants,
) -> Result<Dataset> {
    let mut cal_ids: Vec<&str> = design
        .experiments
        .iter()
        .filter(|e| e.kind == ExperimentKind::Calibration)
        .map(|e| e.id.as_str())
        .collect();
    cal_ids.sort_unstable();
    if cal_ids.len() != beta.calibration.len() {
        return Err(Error::Dataset(format!(
            "design has {} calibration experiments but β has {} initial conditions",
            cal_ids.len(),
            beta.calibration.len()
        )));
    }
    let mut experiments = Vec::with_capacity(design.experiments.len());
    for exp in &design.experiments {
        let ic = match exp.kind {
            ExperimentKind::Pollution => beta.pollution,
            ExperimentKind::Calibration => {
                let k = cal_ids.iter().position(|id| *id == exp.id).expect("listed");
                beta.calibration[k]
            }
        };
        let t_end = exp.times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sol = ExperimentSolution::solve(beta, constants, ic, t_end)?;
        let mut observations = Vec::with_capacity(exp.times.len());
        for &t in &exp.times {
            let h = sol.physics_level(t)?;
            let mean = h + beta.discrepancy.value_at(h / beta.geometry.h_max);
            let z: f64 = StandardNormal.sample(rng);
            observations.push(Observation {
                t,
                level: mean + beta.sigma * z,
            });
        }
        let held_out = (exp.kind == ExperimentKind::Pollution).then_some(Observation {
            t: ic.t0,
            level: ic.h0,
        });
        experiments.push(Experiment::new(
            exp.id.clone(),
            exp.kind,
            observations,
            design.level_cutoff,
            held_out,
        )?);
    }
    Dataset::new(experiments)
}

/// The tank posterior bundled with its data and priors.
#[derive(Debug, Clone)]
pub struct TankModel {
    dataset: Dataset,
    prior: PriorSpec,
    constants: PhysicalConstants,
    layout: ParameterLayout,
}

impl TankModel {
    pub fn new(dataset: Dataset, prior: PriorSpec, constants: PhysicalConstants, degree: usize) -> Result<Self> {
        prior.validate()?;
        let layout = ParameterLayout::new(degree, dataset.calibration_ids());
        Ok(Self {
            dataset,
            prior,
            constants,
            layout,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn constants(&self) -> &PhysicalConstants {
        &self.constants
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn log_prior(&self, beta: &ParameterVector) -> f64 {
        log_prior(beta, &self.prior)
    }

    pub fn log_likelihood(&self, beta: &ParameterVector) -> f64 {
        log_likelihood(beta, &self.dataset, &self.constants)
    }

    pub fn log_posterior(&self, beta: &ParameterVector) -> f64 {
        log_posterior_unnorm(beta, &self.dataset, &self.prior, &self.constants)
    }

    pub fn predicted_observation_mean(&self, beta: &ParameterVector, id: &str, t: f64) -> Result<f64> {
        predicted_observation_mean(beta, &self.dataset, &self.constants, id, t)
    }

    pub fn to_unconstrained(&self, beta: &ParameterVector) -> Result<(Vec<f64>, f64)> {
        to_unconstrained(beta, &self.layout)
    }

    pub fn from_unconstrained(&self, z: &[f64]) -> Result<ParameterVector> {
        from_unconstrained(z, &self.layout)
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        sample_prior(rng, &self.prior, &self.layout)
    }

    /// Log posterior in constrained coordinates with its gradient.
    pub fn log_posterior_with_gradient(&self, beta: &ParameterVector, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let lp = log_prior_impl(beta, &self.prior, Some(grad));
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + log_likelihood_impl(beta, &self.dataset, &self.constants, Some(grad))
    }
}

impl LogDensity for TankModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let Ok(beta) = self.from_unconstrained(z) else {
            return f64::NEG_INFINITY;
        };
        let lp = self.log_posterior(&beta);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + log_jacobian(z, &self.layout)
    }

    fn log_density_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let Ok(beta) = self.from_unconstrained(z) else {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::NEG_INFINITY;
        };
        let lp = self.log_posterior_with_gradient(&beta, grad);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        let layout = &self.layout;
        let (ic, is, ih) = (IDX_C, layout.sigma_index(), layout.pollution_h0_index());
        let c = beta.orifice.discharge;
        let h_max = beta.geometry.h_max;
        let frac = sigmoid(z[ih]);
        let g_h0 = grad[ih];
        grad[IDX_H_MAX] += g_h0 * frac + 1.0 / h_max;
        grad[ic] = grad[ic] * c * (1.0 - c) + (1.0 - 2.0 * c);
        grad[is] = grad[is] * beta.sigma + 1.0;
        grad[ih] = g_h0 * h_max * frac * (1.0 - frac) + (1.0 - 2.0 * frac);
        lp + log_jacobian(z, layout)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Continuous, Laplace as SLaplace, Normal as SNormal};

    pub(crate) fn truth() -> ParameterVector {
        ParameterVector {
            geometry: TankGeometry::new(14.0, 8.7, 8.4).unwrap(),
            orifice: Orifice::new(0.12, 0.6).unwrap(),
            discrepancy: DiscrepancyCoefficients::new(vec![0.0, 0.0, 0.5]).unwrap(),
            sigma: 0.25,
            pollution: InitialCondition::new(0.0, 12.0),
            calibration: vec![InitialCondition::new(0.0, 14.0), InitialCondition::new(0.0, 14.0)],
        }
    }

    fn design() -> DatasetDesign {
        DatasetDesign {
            experiments: vec![
                ExperimentDesign {
                    id: "pollution".into(),
                    kind: ExperimentKind::Pollution,
                    times: vec![180.0],
                },
                ExperimentDesign {
                    id: "cal1".into(),
                    kind: ExperimentKind::Calibration,
                    times: (0..25).map(|i| 15.0 * i as f64).collect(),
                },
                ExperimentDesign {
                    id: "cal2".into(),
                    kind: ExperimentKind::Calibration,
                    times: (0..25).map(|i| 5.0 + 15.0 * i as f64).collect(),
                },
            ],
            level_cutoff: 1.0,
        }
    }

    fn synthetic() -> TankModel {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = simulate_dataset(&mut rng, &truth(), &design(), &PhysicalConstants::default()).unwrap();
        TankModel::new(data, default_prior_spec(), PhysicalConstants::default(), 2).unwrap()
    }

    #[test]
    fn default_prior_matches_reported_values() {
        let spec = default_prior_spec();
        assert_relative_eq!(spec.discharge.mean(), 0.6);
        assert_relative_eq!(spec.sigma.mean(), 0.25);
        assert_eq!(spec.h_max.mean(), 14.0);
        assert_eq!(spec.x_t.mean(), 8.7);
        assert_eq!(spec.x_b.mean(), 8.4);
        assert_eq!(spec.radius.mean(), 0.12);
        if let Prior::Normal { sd, .. } = spec.radius {
            assert_relative_eq!(sd, 0.006, max_relative = 1e-12);
        }
    }

    #[test]
    fn prior_densities_match_statrs() {
        let n = Prior::Normal { mean: 8.7, sd: 0.1 };
        let sn = SNormal::new(8.7, 0.1).unwrap();
        for x in [8.5, 8.7, 9.0] {
            assert_relative_eq!(n.log_density(x), sn.ln_pdf(x), max_relative = 1e-12);
        }
        let l = Prior::Laplace { location: 0.0, scale: 0.25 };
        let sl = SLaplace::new(0.0, 0.25).unwrap();
        for x in [-1.0, 0.0, 0.3] {
            assert_relative_eq!(l.log_density(x), sl.ln_pdf(x), max_relative = 1e-12);
        }
        let b = Prior::Beta { alpha: 6.0, beta: 4.0 };
        // Beta(6, 4) density at 0.5: 504 * 0.5^5 * 0.5^3
        assert_relative_eq!(b.log_density(0.5), (504.0f64 * 0.5f64.powi(8)).ln(), max_relative = 1e-12);
        assert_eq!(b.log_density(1.5), f64::NEG_INFINITY);
        let e = Prior::Exponential { rate: 4.0 };
        assert_relative_eq!(e.log_density(0.25), 4f64.ln() - 1.0);
        let es = Prior::ExponentialScale { scale: 0.25 };
        assert_relative_eq!(es.log_density(0.3), e.log_density(0.3));
    }

    #[test]
    fn prior_support_violations() {
        let spec = default_prior_spec();
        let mut beta = truth();
        beta.orifice.discharge = 1.5;
        assert_eq!(log_prior(&beta, &spec), f64::NEG_INFINITY);
        let mut beta = truth();
        beta.pollution.h0 = 14.5;
        assert_eq!(log_prior(&beta, &spec), f64::NEG_INFINITY);
        let mut beta = truth();
        beta.sigma = 0.0;
        assert_eq!(log_prior(&beta, &spec), f64::NEG_INFINITY);
    }

    #[test]
    fn gaussian_terms_peak_at_their_modes() {
        // With everything else fixed, moving h_max off its mode changes only
        // the Normal(14, 0.1²) term and the 1/h_max uniform term.
        let spec = default_prior_spec();
        let beta = truth();
        let mut shifted = truth();
        shifted.geometry.h_max = 14.05;
        let diff = log_prior(&beta, &spec) - log_prior(&shifted, &spec);
        let expected = 0.5 * (0.05f64 / 0.1).powi(2) + (14.05f64 / 14.0).ln();
        assert_relative_eq!(diff, expected, max_relative = 1e-10);
        // the Gaussian term at its mode is -log(√(2π) s)
        let n = Prior::Normal { mean: 14.0, sd: 0.1 };
        assert_relative_eq!(n.log_density(14.0), -((2.0 * std::f64::consts::PI).sqrt() * 0.1).ln());
    }

    #[test]
    fn likelihood_examples() {
        let c = PhysicalConstants::default();
        let empty = Dataset { experiments: vec![] };
        assert_eq!(log_likelihood(&truth(), &empty, &c), 0.0);

        let mut beta = truth();
        beta.sigma = 1.0;
        beta.discrepancy = DiscrepancyCoefficients::zeros(2);
        beta.calibration.clear();
        let t = 120.0;
        let h = {
            let traj = integrate(
                &Dynamics::new(&beta.geometry, &beta.orifice, &c),
                &beta.pollution,
                t,
            )
            .unwrap();
            traj.level_at(t).unwrap()
        };
        for (offset, expected) in [(0.0, -0.918_938_533_204_672), (1.0, -1.418_938_533_204_672)] {
            let exp = Experiment::new(
                "p",
                ExperimentKind::Pollution,
                vec![Observation { t, level: h + offset }],
                0.0,
                None,
            )
            .unwrap();
            let data = Dataset::new(vec![exp]).unwrap();
            assert_relative_eq!(log_likelihood(&beta, &data, &c), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn likelihood_factorizes_over_experiments() {
        let model = synthetic();
        let beta = truth();
        let parts = experiment_log_likelihoods(&beta, model.dataset(), model.constants());
        assert_eq!(parts.len(), 3);
        assert_relative_eq!(parts.iter().sum::<f64>(), model.log_likelihood(&beta), max_relative = 1e-14);
    }

    #[test]
    fn posterior_is_prior_plus_likelihood() {
        let model = synthetic();
        let beta = truth();
        assert_relative_eq!(
            model.log_posterior(&beta),
            model.log_prior(&beta) + model.log_likelihood(&beta),
            max_relative = 1e-14
        );
        let mut out = truth();
        out.orifice.discharge = -0.2;
        assert_eq!(model.log_posterior(&out), f64::NEG_INFINITY);
    }

    #[test]
    fn posterior_invariant_to_experiment_order() {
        let model = synthetic();
        let mut reversed: Vec<Experiment> = model.dataset().experiments().to_vec();
        reversed.reverse();
        let data = Dataset::new(reversed).unwrap();
        let beta = truth();
        assert_eq!(
            log_posterior_unnorm(&beta, &data, model.prior(), model.constants()),
            model.log_posterior(&beta)
        );
    }

    #[test]
    fn predicted_mean_examples() {
        let model = synthetic();
        let mut beta = truth();
        beta.discrepancy = DiscrepancyCoefficients::zeros(2);
        let at_t0 = model.predicted_observation_mean(&beta, "pollution", 0.0).unwrap();
        assert_eq!(at_t0, 12.0);
        let mut last = f64::INFINITY;
        for i in 1..60 {
            let t = 5.0 * i as f64;
            let m = model.predicted_observation_mean(&beta, "cal1", t).unwrap();
            let traj = crate::forward::simulate_level(
                &beta.geometry,
                &beta.orifice,
                model.constants(),
                &beta.calibration[0],
                t,
            )
            .unwrap();
            assert_eq!(m, traj.level_at(t).unwrap());
            assert!(m <= last);
            last = m;
        }
        assert!(model.predicted_observation_mean(&beta, "nope", 1.0).is_err());
    }

    #[test]
    fn transform_examples() {
        let model = synthetic();
        let mut beta = truth();
        beta.orifice.discharge = 0.5;
        beta.sigma = 2.0;
        let (z, _) = model.to_unconstrained(&beta).unwrap();
        assert_eq!(z[IDX_C], 0.0);
        assert_relative_eq!(z[model.layout().sigma_index()], 2f64.ln());
        let back = model.from_unconstrained(&z).unwrap();
        for (a, b) in back.to_flat().iter().zip(beta.to_flat()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        // σ contributes log σ = log 2 to the log-Jacobian: compare against the
        // same point with σ = 1.
        let mut unit = beta.clone();
        unit.sigma = 1.0;
        let (_, lj2) = model.to_unconstrained(&beta).unwrap();
        let (_, lj1) = model.to_unconstrained(&unit).unwrap();
        assert_relative_eq!(lj2 - lj1, 2f64.ln(), max_relative = 1e-12);

        let mut bad = z.clone();
        bad[0] = f64::NAN;
        assert!(model.from_unconstrained(&bad).is_err());
    }

    #[test]
    fn unconstrained_gradient_matches_finite_differences() {
        let model = synthetic();
        let mut beta = truth();
        beta.pollution = InitialCondition::new(1.3, 11.6);
        beta.calibration[0] = InitialCondition::new(0.1, 13.9);
        beta.calibration[1] = InitialCondition::new(-0.2, 14.1);
        beta.discrepancy = DiscrepancyCoefficients::new(vec![0.3, -0.1, 0.4]).unwrap();
        beta.orifice.discharge = 0.57;
        beta.sigma = 0.3;
        let (z, _) = model.to_unconstrained(&beta).unwrap();
        let mut grad = vec![0.0; z.len()];
        let f0 = model.log_density_and_gradient(&z, &mut grad);
        assert_relative_eq!(f0, model.log_density(&z), max_relative = 1e-14);
        let names = model.layout().names();
        for i in 0..z.len() {
            let e = 1e-5;
            let mut zp = z.clone();
            zp[i] += e;
            let mut zm = z.clone();
            zm[i] -= e;
            let fd = (model.log_density(&zp) - model.log_density(&zm)) / (2.0 * e);
            assert!(
                (grad[i] - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                "{}: analytic {} vs fd {}",
                names[i],
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn noise_free_simulation_equals_means() {
        let mut beta = truth();
        beta.sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = simulate_dataset(&mut rng, &beta, &design(), &PhysicalConstants::default()).unwrap();
        let c = PhysicalConstants::default();
        for exp in data.experiments() {
            for o in &exp.observations {
                // separate solves end at different times, so agreement is to solver tolerance
                let m = predicted_observation_mean(&beta, &data, &c, &exp.id, o.t).unwrap();
                assert_relative_eq!(o.level, m, max_relative = 1e-7);
            }
        }
        let held = data.pollution().held_out.unwrap();
        assert_eq!((held.t, held.level), (0.0, 12.0));
    }

    #[test]
    fn prior_draws_are_reproducible() {
        let model = synthetic();
        let a = model.sample_prior(&mut ChaCha8Rng::seed_from_u64(3));
        let b = model.sample_prior(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn discharge_prior_draws_have_mean_point_six() {
        let spec = default_prior_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean = (0..n).map(|_| spec.discharge.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.6).abs() < 0.005, "{mean}");
    }

    #[test]
    fn laplace_draws_match_moments() {
        let p = Prior::Laplace { location: 0.0, scale: 0.25 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| p.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let mean_abs = xs.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005);
        assert!((mean_abs - 0.25).abs() < 0.005);
    }

    #[test]
    fn pollution_level_prior_fills_tank_uniformly() {
        let model = synthetic();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 20_000;
        let mut u: Vec<f64> = (0..n)
            .map(|_| {
                let b = model.sample_prior(&mut rng);
                b.pollution.h0 / b.geometry.h_max
            })
            .collect();
        u.sort_by(|a, b| a.total_cmp(b));
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = x - i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64 - x;
                lo.max(hi)
            })
            .fold(0.0, f64::max);
        // Kolmogorov–Smirnov critical value at α = 0.01
        assert!(d < 1.63 / (n as f64).sqrt(), "D = {d}");
    }

    #[test]
    fn dataset_validation() {
        let obs = |t: f64, level: f64| Observation { t, level };
        assert!(Experiment::new("p", ExperimentKind::Pollution, vec![obs(1.0, 2.0), obs(2.0, 1.0)], 0.0, None).is_err());
        assert!(Experiment::new("c", ExperimentKind::Calibration, vec![], 0.0, None).is_err());
        assert!(Experiment::new("c", ExperimentKind::Calibration, vec![obs(1.0, 2.0), obs(1.0, 1.9)], 0.0, None).is_err());
        let cal = Experiment::new("c", ExperimentKind::Calibration, vec![obs(0.0, 5.0), obs(1.0, 0.5)], 1.0, None).unwrap();
        assert_eq!(cal.observations.len(), 1);
        assert!(Dataset::new(vec![cal.clone()]).is_err());
    }

    #[test]
    fn transformed_beta_density_integrates_to_one() {
        // ∫ Beta(6,4)(sigmoid z) · sigmoid'(z) dz over the real line
        let p = Prior::Beta { alpha: 6.0, beta: 4.0 };
        let (lo, hi, n) = (-30.0, 30.0, 60_000);
        let h = (hi - lo) / n as f64;
        let f = |z: f64| (p.log_density(sigmoid(z)) + log_sigmoid_jacobian(z)).exp();
        let mut total = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            total += f(lo + i as f64 * h);
        }
        assert_relative_eq!(total * h, 1.0, max_relative = 1e-8);
    }
}
