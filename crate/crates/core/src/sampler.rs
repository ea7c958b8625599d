//! Multi-chain MCMC on an unconstrained space.
//!
//! Two transition kernels are available:
//!
//! * adaptive random-walk Metropolis with a full-covariance Gaussian proposal,
//!   whose covariance and global scale are learned during burn-in;
//! * the No-U-Turn sampler (multinomial trajectory sampling, generalized
//!   U-turn criterion) with a dense metric and a dual-averaging step size,
//!   adapted in expanding windows during burn-in.
//!
//! All adaptation stops at the end of burn-in, so the post-burn-in segment of
//! every chain is a time-homogeneous Markov chain with the target as its
//! stationary distribution. Each chain owns a ChaCha stream derived from the
//! configured seed and its chain id, which makes runs bit-reproducible
//! regardless of how chains are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TankModel;

/// An unnormalized log density on `R^d`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> f64;

    /// Log density and its gradient. Defaults to central finite differences.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let f0 = self.log_density(x);
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let e = 1e-6 * x[i].abs().max(1.0);
            probe[i] = x[i] + e;
            let fp = self.log_density(&probe);
            probe[i] = x[i] - e;
            let fm = self.log_density(&probe);
            probe[i] = x[i];
            grad[i] = (fp - fm) / (2.0 * e);
        }
        f0
    }
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (**self).log_density(x)
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (**self).log_density_and_gradient(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    AdaptiveMetropolis,
    /// No-U-Turn Hamiltonian Monte Carlo.
    Hmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub burn_in_fraction: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Defaults to 0.234 for Metropolis and 0.8 for HMC.
    pub target_acceptance: Option<f64>,
    pub max_tree_depth: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_iterations: 5000,
            burn_in_fraction: 1.0 / 3.0,
            seed: 0,
            algorithm: Algorithm::Hmc,
            target_acceptance: None,
            max_tree_depth: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be at least 1".into()));
        }
        if self.n_iterations == 0 {
            return Err(Error::Config("n_iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config(format!(
                "burn_in_fraction must lie in [0, 1), got {}",
                self.burn_in_fraction
            )));
        }
        if let Some(t) = self.target_acceptance {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("target acceptance {t} outside (0, 1)")));
            }
        }
        if self.max_tree_depth == 0 {
            return Err(Error::Config("max_tree_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of discarded iterations, `floor(fraction · n_iterations)`.
    pub fn burn_in(&self) -> usize {
        (self.burn_in_fraction * self.n_iterations as f64).floor() as usize
    }

    pub fn target_acceptance(&self) -> f64 {
        self.target_acceptance.unwrap_or(match self.algorithm {
            Algorithm::AdaptiveMetropolis => 0.234,
            Algorithm::Hmc => 0.8,
        })
    }
}

/// One chain's draws in unconstrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub chain_id: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    /// Metropolis acceptance indicator or NUTS mean acceptance probability.
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    /// Step size (HMC) or proposal scale (Metropolis) after adaptation.
    pub step_size: f64,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn kept_draws(&self) -> &[Vec<f64>] {
        &self.draws[self.burn_in.min(self.draws.len())..]
    }

    pub fn kept_log_density(&self) -> &[f64] {
        &self.log_density[self.burn_in.min(self.log_density.len())..]
    }

    /// Mean acceptance statistic after burn-in.
    pub fn acceptance_rate(&self) -> f64 {
        let kept = &self.accept_stat[self.burn_in.min(self.accept_stat.len())..];
        if kept.is_empty() {
            return f64::NAN;
        }
        kept.iter().sum::<f64>() / kept.len() as f64
    }

    pub fn divergences(&self) -> usize {
        self.divergent[self.burn_in.min(self.divergent.len())..]
            .iter()
            .filter(|d| **d)
            .count()
    }

    /// Post-burn-in draws of coordinate `i`.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.kept_draws().iter().map(|d| d[i]).collect()
    }
}

/// Independent random stream for chain `chain_id`.
pub fn chain_rng(seed: u64, chain_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain_id as u64 + 1);
    rng
}

/// Run a single chain from `init`.
pub fn run_chain<T: LogDensity, R: Rng>(
    target: &T,
    init: &[f64],
    config: &SamplerConfig,
    chain_id: usize,
    rng: &mut R,
) -> Result<ChainTrace> {
    config.validate()?;
    if init.len() != target.dim() {
        return Err(Error::Initialization(format!(
            "initial point has {} coordinates, target has {}",
            init.len(),
            target.dim()
        )));
    }
    let lp = target.log_density(init);
    if !lp.is_finite() {
        return Err(Error::Initialization(format!(
            "target is not finite at the initial point (log density {lp}); \
             initialize from a prior draw or the prior mode"
        )));
    }
    let trace = match config.algorithm {
        Algorithm::AdaptiveMetropolis => metropolis_chain(target, init, lp, config, rng),
        Algorithm::Hmc => nuts_chain(target, init, config, rng)?,
    };
    Ok(ChainTrace {
        chain_id,
        seed: config.seed,
        ..trace
    })
}

fn run_one<T: LogDensity>(target: &T, config: &SamplerConfig, inits: &[Vec<f64>], id: usize) -> Result<ChainTrace> {
    let mut rng = chain_rng(config.seed, id);
    run_chain(target, &inits[id], config, id, &mut rng).map_err(|e| match e {
        Error::Initialization(msg) => Error::Initialization(format!("chain {id}: {msg}")),
        other => other,
    })
}

fn check_inits(config: &SamplerConfig, inits: &[Vec<f64>]) -> Result<()> {
    config.validate()?;
    if inits.len() != config.n_chains {
        return Err(Error::Initialization(format!(
            "{} initial points supplied for {} chains",
            inits.len(),
            config.n_chains
        )));
    }
    Ok(())
}

/// Run every chain on the current thread.
pub fn run_chains_sequential<T: LogDensity>(
    target: &T,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
) -> Result<Vec<ChainTrace>> {
    check_inits(config, inits)?;
    (0..config.n_chains)
        .map(|id| run_one(target, config, inits, id))
        .collect()
}

/// Run chains concurrently on the rayon pool. Output order follows chain id.
#[cfg(feature = "parallel")]
pub fn run_chains_parallel<T: LogDensity>(
    target: &T,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
) -> Result<Vec<ChainTrace>> {
    use rayon::prelude::*;

    check_inits(config, inits)?;
    (0..config.n_chains)
        .into_par_iter()
        .map(|id| run_one(target, config, inits, id))
        .collect()
}

/// Run `config.n_chains` independent chains, one per initial point.
pub fn run_chains<T: LogDensity>(target: &T, config: &SamplerConfig, inits: &[Vec<f64>]) -> Result<Vec<ChainTrace>> {
    #[cfg(feature = "parallel")]
    {
        run_chains_parallel(target, config, inits)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_chains_sequential(target, config, inits)
    }
}

/// Draw from the prior until the posterior is finite; return the unconstrained
/// image of the accepted draw. `max_retries` counts draws after the first.
pub fn initialize_from_prior<R: Rng + ?Sized>(
    rng: &mut R,
    model: &TankModel,
    max_retries: usize,
) -> Result<Vec<f64>> {
    for _ in 0..=max_retries {
        let beta = model.sample_prior(rng);
        if !model.log_posterior(&beta).is_finite() {
            continue;
        }
        let Ok((z, _)) = model.to_unconstrained(&beta) else {
            continue;
        };
        if model.log_density(&z).is_finite() {
            return Ok(z);
        }
    }
    Err(Error::Initialization(format!(
        "no prior draw with finite posterior density after {} attempts",
        max_retries + 1
    )))
}

/// One initial point per chain, each from that chain's own stream.
pub fn initialize_chains(model: &TankModel, config: &SamplerConfig, max_retries: usize) -> Result<Vec<Vec<f64>>> {
    (0..config.n_chains)
        .map(|id| {
            // a stream distinct from the sampling stream of the same chain
            let mut rng = chain_rng(config.seed ^ 0x9E37_79B9_7F4A_7C15, id);
            initialize_from_prior(&mut rng, model, max_retries)
        })
        .collect()
}

/// Running mean and covariance (Welford).
#[derive(Debug, Clone)]
struct CovarianceEstimator {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl CovarianceEstimator {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.m2 / (self.n as f64 - 1.0)
    }

    fn reset(&mut self) {
        *self = Self::new(self.mean.len());
    }
}

fn lower_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

fn metropolis_chain<T: LogDensity, R: Rng>(
    target: &T,
    init: &[f64],
    init_lp: f64,
    config: &SamplerConfig,
    rng: &mut R,
) -> ChainTrace {
    let dim = init.len();
    let burn_in = config.burn_in();
    let target_accept = config.target_acceptance();
    let mut x = init.to_vec();
    let mut lp = init_lp;
    let optimal_log_scale = (2.38 / (dim as f64).sqrt()).ln();
    let mut log_scale = optimal_log_scale + 0.1f64.ln();
    let mut chol = DMatrix::<f64>::identity(dim, dim);
    let mut estimator = CovarianceEstimator::new(dim);
    let schedule = WarmupSchedule::new(burn_in);
    let mut scale_counter = 0.0f64;

    let mut trace = ChainTrace {
        chain_id: 0,
        seed: config.seed,
        burn_in,
        draws: Vec::with_capacity(config.n_iterations),
        log_density: Vec::with_capacity(config.n_iterations),
        accept_stat: Vec::with_capacity(config.n_iterations),
        divergent: Vec::with_capacity(config.n_iterations),
        step_size: 0.0,
    };
    let mut xi = vec![0.0; dim];
    let mut proposal = vec![0.0; dim];

    for iter in 0..config.n_iterations {
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let scale = log_scale.exp();
        for i in 0..dim {
            let mut step = 0.0;
            for j in 0..=i {
                step += chol[(i, j)] * xi[j];
            }
            proposal[i] = x[i] + scale * step;
        }
        let lp_new = target.log_density(&proposal);
        let log_ratio = lp_new - lp;
        let accept_prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
        let u: f64 = rng.random();
        let accepted = u < accept_prob;
        if accepted {
            x.copy_from_slice(&proposal);
            lp = lp_new;
        }

        if iter < burn_in {
            scale_counter += 1.0;
            log_scale += scale_counter.powf(-0.6) * (accept_prob - target_accept);
            if schedule.in_slow_window(iter) {
                estimator.add(&x);
            }
            if let Some(pos) = schedule.metric_updates.iter().position(|&e| e == iter) {
                if estimator.n > 2 {
                    let mut cov = estimator.covariance();
                    for i in 0..dim {
                        cov[(i, i)] = cov[(i, i)] * (1.0 + 1e-6) + 1e-12;
                    }
                    if let Some(l) = lower_cholesky(&cov) {
                        chol = l;
                        log_scale = optimal_log_scale;
                        scale_counter = 0.0;
                    }
                }
                if pos + 1 < schedule.metric_updates.len() {
                    estimator.reset();
                }
            }
        }

        trace.draws.push(x.clone());
        trace.log_density.push(lp);
        trace.accept_stat.push(if accepted { 1.0 } else { 0.0 });
        trace.divergent.push(false);
    }
    trace.step_size = log_scale.exp();
    trace
}

/// Dense Euclidean metric `M⁻¹ = L Lᵀ`.
#[derive(Debug, Clone)]
struct Metric {
    dim: usize,
    /// Row-major inverse metric.
    inv: Vec<f64>,
    /// Row-major lower Cholesky factor of the inverse metric.
    chol: Vec<f64>,
}

impl Metric {
    fn identity(dim: usize) -> Self {
        let m = DMatrix::<f64>::identity(dim, dim);
        Self::from_inverse(&m).expect("identity is positive definite")
    }

    fn from_inverse(inv: &DMatrix<f64>) -> Option<Self> {
        let l = lower_cholesky(inv)?;
        let dim = inv.nrows();
        let row_major = |m: &DMatrix<f64>| {
            let mut v = Vec::with_capacity(dim * dim);
            for i in 0..dim {
                for j in 0..dim {
                    v.push(m[(i, j)]);
                }
            }
            v
        };
        Some(Self {
            dim,
            inv: row_major(inv),
            chol: row_major(&l),
        })
    }

    fn velocity(&self, p: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.inv.chunks_exact(self.dim)) {
            *o = dot(row, p);
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        let quad: f64 = p
            .iter()
            .zip(self.inv.chunks_exact(self.dim))
            .map(|(pi, row)| pi * dot(row, p))
            .sum();
        0.5 * quad
    }

    /// `p = L⁻ᵀ ξ`, so that `p ~ N(0, M)`.
    fn sample_momentum<R: Rng>(&self, rng: &mut R, p: &mut [f64]) {
        let n = self.dim;
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for i in (0..n).rev() {
            let tail: f64 = p[i + 1..]
                .iter()
                .enumerate()
                .map(|(k, pj)| self.chol[(i + 1 + k) * n + i] * pj)
                .sum();
            p[i] = (xi[i] - tail) / self.chol[i * n + i];
        }
    }
}

#[derive(Debug, Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * step).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let accept_stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Stan-style warmup windows: fast initial buffer, doubling slow windows that
/// estimate the metric, fast terminal buffer.
#[derive(Debug, Clone)]
struct WarmupSchedule {
    /// Iterations (0-based) after which the metric is re-estimated.
    metric_updates: Vec<usize>,
    window_starts: Vec<usize>,
}

impl WarmupSchedule {
    fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if warmup < 20 {
            return Self {
                metric_updates: vec![],
                window_starts: vec![],
            };
        }
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let slow_end = warmup - term;
        let mut metric_updates = Vec::new();
        let mut window_starts = Vec::new();
        let mut start = init;
        let mut size = base;
        while start < slow_end {
            let mut end = start + size;
            let next_size = 2 * size;
            if end + next_size > slow_end {
                end = slow_end;
            }
            window_starts.push(start);
            metric_updates.push(end - 1);
            start = end;
            size = next_size;
        }
        Self {
            metric_updates,
            window_starts,
        }
    }

    fn in_slow_window(&self, iter: usize) -> bool {
        match (self.window_starts.first(), self.metric_updates.last()) {
            (Some(&s), Some(&e)) => iter >= s && iter <= e,
            _ => false,
        }
    }
}

struct Nuts<'a, T: LogDensity> {
    target: &'a T,
    metric: Metric,
    step: f64,
    max_depth: usize,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
    scratch: Vec<f64>,
}

const MAX_DELTA_H: f64 = 1000.0;

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(out: &mut [f64], a: &[f64], b: &[f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<T: LogDensity> Nuts<'_, T> {
    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.logp + self.metric.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn leapfrog(&mut self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        self.metric.velocity(&z.p, &mut self.scratch);
        for (q, v) in z.q.iter_mut().zip(&self.scratch) {
            *q += eps * v;
        }
        z.logp = self.target.log_density_and_gradient(&z.q, &mut z.grad);
        if !z.logp.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.logp = f64::NEG_INFINITY;
            z.grad.iter_mut().for_each(|g| *g = 0.0);
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; p.len()];
        self.metric.velocity(p, &mut v);
        v
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree<R: Rng>(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
        rng: &mut R,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            self.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            let sharp = self.p_sharp(&z.p);
            p_sharp_beg.clone_from(&sharp);
            *p_sharp_end = sharp;
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        // initial subtree
        let mut log_sum_weight_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut log_sum_weight_init,
            rng,
        );
        if !valid_init {
            return false;
        }

        // final subtree
        let mut z_propose_final = z.clone();
        let mut log_sum_weight_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut log_sum_weight_final,
            rng,
        );
        if !valid_final {
            return false;
        }

        // multinomial sample from the combined subtree
        let log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, log_sum_weight_subtree);
        if log_sum_weight_final > log_sum_weight_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (log_sum_weight_final - log_sum_weight_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let mut rho_subtree = vec![0.0; dim];
        add_into(&mut rho_subtree, &rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }

        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let mut rho_extended = vec![0.0; dim];
        add_into(&mut rho_extended, &rho_init, &p_final_beg);
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &rho_extended);
        add_into(&mut rho_extended, &rho_final, &p_init_end);
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &rho_extended);
        persist
    }

    /// One NUTS transition from `current`. Returns the new point and the mean
    /// acceptance probability over the trajectory.
    fn transition<R: Rng>(&mut self, current: &Point, rng: &mut R) -> (Point, f64) {
        let dim = current.q.len();
        let mut z = current.clone();
        self.metric.sample_momentum(rng, &mut z.p);
        self.n_leapfrog = 0;
        self.sum_metro_prob = 0.0;
        self.divergent = false;

        let h0 = self.hamiltonian(&z);
        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let p_sharp0 = self.p_sharp(&z.p);
        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = p_sharp0.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp0.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp0.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp0;

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut log_sum_weight_subtree = f64::NEG_INFINITY;

            let valid = if rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut log_sum_weight_subtree,
                    rng,
                )
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut log_sum_weight_subtree,
                    rng,
                )
            };
            if !valid {
                break;
            }
            depth += 1;

            if log_sum_weight_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (log_sum_weight_subtree - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

            add_into(&mut rho, &rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let mut rho_extended = vec![0.0; dim];
            add_into(&mut rho_extended, &rho_bck, &p_fwd_bck);
            persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_extended);
            add_into(&mut rho_extended, &rho_fwd, &p_bck_fwd);
            persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_extended);
            if !persist {
                break;
            }
        }

        let accept = if self.n_leapfrog == 0 {
            0.0
        } else {
            self.sum_metro_prob / self.n_leapfrog as f64
        };
        (z_sample, accept)
    }

    /// Doubling/halving heuristic for a step size with acceptance near 0.8.
    fn init_step_size<R: Rng>(&mut self, current: &Point, rng: &mut R) {
        let log_target = 0.8f64.ln();
        let mut z = current.clone();
        self.metric.sample_momentum(rng, &mut z.p);
        let h0 = self.hamiltonian(&z);
        self.leapfrog(&mut z, self.step);
        let delta_h = h0 - self.hamiltonian(&z);
        let direction = if delta_h > log_target { 1 } else { -1 };
        for _ in 0..100 {
            let mut z = current.clone();
            self.metric.sample_momentum(rng, &mut z.p);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step);
            let delta_h = h0 - self.hamiltonian(&z);
            // a NaN energy change stops the search in either direction
            let above = delta_h > log_target;
            let below = delta_h < log_target;
            if (direction == 1 && !above) || (direction == -1 && !below) {
                break;
            }
            self.step = if direction == 1 { self.step * 2.0 } else { self.step * 0.5 };
            if !(1e-8..=1e7).contains(&self.step) {
                self.step = self.step.clamp(1e-8, 1e7);
                break;
            }
        }
    }
}

fn nuts_chain<T: LogDensity, R: Rng>(
    target: &T,
    init: &[f64],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainTrace> {
    let dim = init.len();
    let burn_in = config.burn_in();
    let delta = config.target_acceptance();
    let mut grad = vec![0.0; dim];
    let logp = target.log_density_and_gradient(init, &mut grad);
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Initialization("non-finite gradient at the initial point".into()));
    }
    let mut current = Point {
        q: init.to_vec(),
        p: vec![0.0; dim],
        grad,
        logp,
    };

    let mut nuts = Nuts {
        target,
        metric: Metric::identity(dim),
        step: 1.0,
        max_depth: config.max_tree_depth,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
        scratch: vec![0.0; dim],
    };
    nuts.init_step_size(&current, rng);
    let mut averaging = DualAveraging::new(nuts.step, delta);
    let schedule = WarmupSchedule::new(burn_in);
    let mut estimator = CovarianceEstimator::new(dim);

    let mut trace = ChainTrace {
        chain_id: 0,
        seed: config.seed,
        burn_in,
        draws: Vec::with_capacity(config.n_iterations),
        log_density: Vec::with_capacity(config.n_iterations),
        accept_stat: Vec::with_capacity(config.n_iterations),
        divergent: Vec::with_capacity(config.n_iterations),
        step_size: nuts.step,
    };

    for iter in 0..config.n_iterations {
        let (next, accept) = nuts.transition(&current, rng);
        current = next;

        if iter < burn_in {
            nuts.step = averaging.update(accept);
            if schedule.in_slow_window(iter) {
                estimator.add(&current.q);
            }
            if let Some(pos) = schedule.metric_updates.iter().position(|&e| e == iter) {
                let n = estimator.n as f64;
                if estimator.n >= 3 {
                    let mut cov = estimator.covariance() * (n / (n + 5.0));
                    for i in 0..dim {
                        cov[(i, i)] += 1e-3 * 5.0 / (n + 5.0);
                    }
                    if let Some(metric) = Metric::from_inverse(&cov) {
                        nuts.metric = metric;
                    }
                }
                // windows after the first accumulate from scratch
                if pos + 1 < schedule.metric_updates.len() {
                    estimator.reset();
                }
                nuts.init_step_size(&current, rng);
                averaging = DualAveraging::new(nuts.step, delta);
            }
            if iter + 1 == burn_in {
                nuts.step = averaging.final_step();
            }
        }

        trace.draws.push(current.q.clone());
        trace.log_density.push(current.logp);
        trace.accept_stat.push(accept);
        trace.divergent.push(nuts.divergent);
    }
    trace.step_size = nuts.step;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Zero-mean Gaussian with the given covariance.
    pub(crate) struct Gaussian {
        precision: DMatrix<f64>,
        mean: Vec<f64>,
    }

    impl Gaussian {
        pub(crate) fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Self {
            Self {
                precision: cov.try_inverse().unwrap(),
                mean,
            }
        }
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn log_density(&self, x: &[f64]) -> f64 {
            let d = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
            -0.5 * (d.transpose() * &self.precision * &d)[(0, 0)]
        }

        fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let d = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
            let g = -(&self.precision * &d);
            grad.copy_from_slice(g.as_slice());
            -0.5 * d.dot(&(&self.precision * &d))
        }
    }

    fn std_normal() -> Gaussian {
        Gaussian::new(vec![0.0], DMatrix::identity(1, 1))
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn burn_in_is_floor_of_fraction() {
        let c = SamplerConfig {
            n_iterations: 5000,
            ..Default::default()
        };
        assert_eq!(c.burn_in(), 1666);
        let c = SamplerConfig {
            n_iterations: 10,
            burn_in_fraction: 0.55,
            ..Default::default()
        };
        assert_eq!(c.burn_in(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig { n_chains: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { burn_in_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { target_acceptance: Some(1.2), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn non_finite_init_is_rejected() {
        struct HalfLine;
        impl LogDensity for HalfLine {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                if x[0] > 0.0 { -x[0] } else { f64::NEG_INFINITY }
            }
        }
        let mut rng = chain_rng(1, 0);
        let err = run_chain(&HalfLine, &[-1.0], &SamplerConfig::default(), 0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Initialization(_)));
    }

    #[test]
    fn warmup_schedule_matches_stan_layout() {
        let s = WarmupSchedule::new(1000);
        assert_eq!(s.window_starts, vec![75, 100, 150, 250, 450]);
        assert_eq!(s.metric_updates, vec![99, 149, 249, 449, 949]);
        assert!(WarmupSchedule::new(10).metric_updates.is_empty());
    }

    #[test]
    fn momentum_has_metric_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let metric = Metric::from_inverse(&cov).unwrap();
        let mut rng = chain_rng(3, 0);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        let mut p = vec![0.0; 2];
        for _ in 0..n {
            metric.sample_momentum(&mut rng, &mut p);
            let v = DVector::from_column_slice(&p);
            acc += &v * v.transpose();
        }
        let emp = acc / n as f64;
        let expected = cov.try_inverse().unwrap();
        assert!((emp - &expected).norm() / expected.norm() < 0.02);
    }

    #[test]
    fn same_seed_same_trace() {
        for algorithm in [Algorithm::AdaptiveMetropolis, Algorithm::Hmc] {
            let config = SamplerConfig {
                n_chains: 2,
                n_iterations: 300,
                algorithm,
                seed: 9,
                ..Default::default()
            };
            let inits = vec![vec![0.5], vec![0.5]];
            let a = run_chains(&std_normal(), &config, &inits).unwrap();
            let b = run_chains(&std_normal(), &config, &inits).unwrap();
            assert_eq!(a, b);
            // identical starting points, different streams
            assert_ne!(a[0].draws[1..10], a[1].draws[1..10]);
        }
    }

    #[test]
    fn sequential_and_default_runners_agree() {
        let config = SamplerConfig {
            n_chains: 3,
            n_iterations: 200,
            seed: 4,
            ..Default::default()
        };
        let inits = vec![vec![0.0]; 3];
        assert_eq!(
            run_chains_sequential(&std_normal(), &config, &inits).unwrap(),
            run_chains(&std_normal(), &config, &inits).unwrap()
        );
    }

    #[test]
    fn standard_normal_moments() {
        for algorithm in [Algorithm::AdaptiveMetropolis, Algorithm::Hmc] {
            let config = SamplerConfig {
                n_chains: 1,
                n_iterations: 60_000,
                burn_in_fraction: 1.0 / 6.0,
                seed: 17,
                algorithm,
                ..Default::default()
            };
            let traces = run_chains(&std_normal(), &config, &[vec![2.0]]).unwrap();
            let xs = traces[0].coordinate(0);
            assert_eq!(xs.len(), 50_000);
            let (m, v) = moments(&xs);
            let ess = crate::diagnostics::effective_sample_size(std::slice::from_ref(&xs)).unwrap().value;
            let mcse = (v / ess).sqrt();
            assert!(m.abs() < 3.0 * mcse, "{algorithm:?}: mean {m}, mcse {mcse}");
            assert!((v - 1.0).abs() < 0.1, "{algorithm:?}: variance {v}");
        }
    }

    #[test]
    fn finite_difference_gradient_default() {
        struct Quad;
        impl LogDensity for Quad {
            fn dim(&self) -> usize {
                2
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                -x[0] * x[0] - 3.0 * x[0] * x[1]
            }
        }
        let mut g = [0.0; 2];
        Quad.log_density_and_gradient(&[1.0, 2.0], &mut g);
        assert!((g[0] - (-2.0 - 6.0)).abs() < 1e-6);
        assert!((g[1] + 3.0).abs() < 1e-6);
    }
}
