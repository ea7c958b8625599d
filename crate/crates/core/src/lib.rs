//! Bayesian reconstruction of the initial liquid level of a draining
//! pyramidal-frustum tank from a single late observation, calibrated against
//! full drainage series.
//!
//! The crate is organized bottom-up:
//!
//! * [`forward`]: Torricelli drainage ODE and its solution;
//! * [`discrepancy`]: Bernstein-polynomial model discrepancy;
//! * [`model`]: priors, likelihood, posterior and synthetic data;
//! * [`sampler`]: multi-chain adaptive Metropolis and NUTS;
//! * [`diagnostics`]: R-hat, ESS, intervals and fit summaries;
//! * [`io`]: configuration, file formats and the command workflow.

pub mod diagnostics;
pub mod discrepancy;
pub mod error;
pub mod forward;
pub mod io;
pub mod model;
pub mod parallel;
pub mod sampler;

pub use error::{Error, Result};
