//! Physics-based drainage model for a truncated inverted square pyramid.
//!
//! The liquid level obeys the Torricelli mass balance
//!
//! ```text
//! α(h) dh/dt = -c π r² √(2 g h),    h(t0) = h0
//! α(h) = [ (h / h_max) x_t + (1 - h / h_max) x_b ]²
//! ```
//!
//! which is integrated with an adaptive Dormand–Prince 5(4) pair. The right-hand
//! side is not Lipschitz at `h = 0`, so integration stops once the level falls to
//! [`DEPLETION_FLOOR`] and the trajectory is clamped to zero from then on.
//!
//! Because the dynamics are separable, the solution also satisfies the implicit
//! relation `G(h0) - G(h(t)) = q (t - t0)` with `q = c π r² √(2g)` and
//! `G(h) = ∫₀ʰ α(u) / √u du`. [`level_sensitivity`] differentiates that relation
//! to obtain exact parameter sensitivities of a solved level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Level (cm) at which the tank is treated as empty.
pub const DEPLETION_FLOOR: f64 = 1e-6;

pub const DEFAULT_GRAVITY: f64 = 981.0;

const RTOL: f64 = 1e-8;
const ATOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankGeometry {
    /// Height (cm).
    pub h_max: f64,
    /// Side length at the top (cm).
    pub x_t: f64,
    /// Side length at the bottom (cm).
    pub x_b: f64,
}

impl TankGeometry {
    pub fn new(h_max: f64, x_t: f64, x_b: f64) -> Result<Self> {
        let geom = Self { h_max, x_t, x_b };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.h_max) && ok(self.x_t) && ok(self.x_b) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "tank dimensions must be positive and finite, got {self:?}"
            )))
        }
    }

    /// Side length at level `h`, linearly extended beyond `[0, h_max]`.
    #[inline]
    pub(crate) fn side_length(&self, h: f64) -> f64 {
        let u = h / self.h_max;
        u * self.x_t + (1.0 - u) * self.x_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orifice {
    /// Radius (cm).
    pub radius: f64,
    /// Dimensionless discharge coefficient in `[0, 1]`.
    pub discharge: f64,
}

impl Orifice {
    pub fn new(radius: f64, discharge: f64) -> Result<Self> {
        let o = Self { radius, discharge };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::domain(format!(
                "orifice radius must be positive, got {}",
                self.radius
            )));
        }
        if !(0.0..=1.0).contains(&self.discharge) {
            return Err(Error::domain(format!(
                "discharge coefficient must lie in [0, 1], got {}",
                self.discharge
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Gravitational acceleration (cm/s²).
    pub gravity: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            gravity: DEFAULT_GRAVITY,
        }
    }
}

impl PhysicalConstants {
    pub fn new(gravity: f64) -> Result<Self> {
        if gravity.is_finite() && gravity > 0.0 {
            Ok(Self { gravity })
        } else {
            Err(Error::domain(format!("gravity must be positive, got {gravity}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    /// Drain start time (s).
    pub t0: f64,
    /// Level at `t0` (cm).
    pub h0: f64,
}

impl InitialCondition {
    pub fn new(t0: f64, h0: f64) -> Self {
        Self { t0, h0 }
    }
}

/// Horizontal cross-sectional area (cm²) at level `h ∈ [0, h_max]`.
pub fn cross_section_area(geom: &TankGeometry, h: f64) -> Result<f64> {
    geom.validate()?;
    if !(0.0..=geom.h_max).contains(&h) {
        return Err(Error::domain(format!(
            "level {h} outside [0, {}]",
            geom.h_max
        )));
    }
    Ok(geom.side_length(h).powi(2))
}

/// Rate of change of the level (cm/s) at level `h`. Exactly zero at `h = 0`.
pub fn drain_rate(
    geom: &TankGeometry,
    orifice: &Orifice,
    constants: &PhysicalConstants,
    h: f64,
) -> Result<f64> {
    if h.is_nan() || h < 0.0 {
        return Err(Error::domain(format!("negative level {h}")));
    }
    orifice.validate()?;
    let area = cross_section_area(geom, h)?;
    if h == 0.0 {
        return Ok(0.0);
    }
    Ok(-orifice.discharge * std::f64::consts::PI * orifice.radius.powi(2)
        * (2.0 * constants.gravity * h).sqrt()
        / area)
}

/// Precomputed right-hand side of the level ODE.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dynamics {
    /// Outflow constant `c π r² √(2g)` (cm^{5/2}/s).
    pub q: f64,
    pub x_b: f64,
    /// Side-length slope `(x_t - x_b) / h_max`.
    pub slope: f64,
}

impl Dynamics {
    pub fn new(geom: &TankGeometry, orifice: &Orifice, constants: &PhysicalConstants) -> Self {
        Self {
            q: outflow_constant(orifice, constants),
            x_b: geom.x_b,
            slope: (geom.x_t - geom.x_b) / geom.h_max,
        }
    }

    #[inline]
    pub fn area(&self, h: f64) -> f64 {
        let s = self.x_b + self.slope * h;
        s * s
    }

    #[inline]
    pub fn rate(&self, h: f64) -> f64 {
        if h <= 0.0 {
            0.0
        } else {
            -self.q * h.sqrt() / self.area(h)
        }
    }
}

fn outflow_constant(orifice: &Orifice, constants: &PhysicalConstants) -> f64 {
    orifice.discharge
        * std::f64::consts::PI
        * orifice.radius.powi(2)
        * (2.0 * constants.gravity).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knot {
    pub t: f64,
    pub h: f64,
    /// dh/dt at the knot.
    pub rate: f64,
}

/// Dense solution of the drainage problem on `[t_start, t_end]`.
#[derive(Debug, Clone)]
pub struct LevelTrajectory {
    knots: Vec<Knot>,
    t_end: f64,
    depletion_time: Option<f64>,
}

impl LevelTrajectory {
    pub fn knots(&self) -> &[Knot] {
        &self.knots
    }

    pub fn t_start(&self) -> f64 {
        self.knots[0].t
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn is_depleted(&self) -> bool {
        self.depletion_time.is_some()
    }

    pub fn depletion_time(&self) -> Option<f64> {
        self.depletion_time
    }

    /// Level at time `t`, interpolated between solver knots.
    pub fn level_at(&self, t: f64) -> Result<f64> {
        level_at(self, t)
    }
}

/// Level at `t` by monotone cubic Hermite interpolation of the solver knots.
pub fn level_at(traj: &LevelTrajectory, t: f64) -> Result<f64> {
    let start = traj.t_start();
    if !(start..=traj.t_end).contains(&t) {
        return Err(Error::OutOfRange {
            t,
            start,
            end: traj.t_end,
        });
    }
    if let Some(td) = traj.depletion_time {
        if t >= td {
            return Ok(0.0);
        }
    }
    let knots = &traj.knots;
    // index of the first knot with knot.t > t
    let i = knots.partition_point(|k| k.t <= t);
    if i == 0 {
        return Ok(knots[0].h);
    }
    if i == knots.len() {
        return Ok(knots[knots.len() - 1].h);
    }
    let (a, b) = (&knots[i - 1], &knots[i]);
    if t == a.t {
        return Ok(a.h);
    }
    Ok(monotone_hermite(a, b, t))
}

fn monotone_hermite(a: &Knot, b: &Knot, t: f64) -> f64 {
    let dt = b.t - a.t;
    let secant = (b.h - a.h) / dt;
    if secant == 0.0 {
        return a.h;
    }
    // Fritsch–Carlson limiter on the knot slopes.
    let mut alpha = (a.rate / secant).max(0.0);
    let mut beta = (b.rate / secant).max(0.0);
    let norm = alpha * alpha + beta * beta;
    if norm > 9.0 {
        let tau = 3.0 / norm.sqrt();
        alpha *= tau;
        beta *= tau;
    }
    let m0 = alpha * secant * dt;
    let m1 = beta * secant * dt;
    let s = (t - a.t) / dt;
    let s2 = s * s;
    let s3 = s2 * s;
    let h = (2.0 * s3 - 3.0 * s2 + 1.0) * a.h
        + (s3 - 2.0 * s2 + s) * m0
        + (-2.0 * s3 + 3.0 * s2) * b.h
        + (s3 - s2) * m1;
    let (lo, hi) = if a.h <= b.h { (a.h, b.h) } else { (b.h, a.h) };
    h.clamp(lo, hi)
}

// Dormand–Prince 5(4) tableau. The right-hand side is autonomous, so the
// stage times are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Solve the drainage problem from `ic` up to `t_end`.
///
/// Levels above `h_max` are allowed and follow the linear extension of the
/// tank walls.
pub fn simulate_level(
    geom: &TankGeometry,
    orifice: &Orifice,
    constants: &PhysicalConstants,
    ic: &InitialCondition,
    t_end: f64,
) -> Result<LevelTrajectory> {
    geom.validate()?;
    orifice.validate()?;
    if !(ic.t0.is_finite() && ic.h0.is_finite() && ic.h0 >= 0.0) {
        return Err(Error::domain(format!("invalid initial condition {ic:?}")));
    }
    if !(t_end.is_finite() && t_end > ic.t0) {
        return Err(Error::domain(format!(
            "t_end = {t_end} must exceed t0 = {}",
            ic.t0
        )));
    }
    let dynamics = Dynamics::new(geom, orifice, constants);
    if dynamics.x_b + dynamics.slope * ic.h0 <= 0.0 {
        return Err(Error::domain("tank walls meet below the initial level"));
    }
    integrate(&dynamics, ic, t_end)
}

pub(crate) fn integrate(
    dynamics: &Dynamics,
    ic: &InitialCondition,
    t_end: f64,
) -> Result<LevelTrajectory> {
    let t0 = ic.t0;
    if ic.h0 <= DEPLETION_FLOOR {
        return Ok(LevelTrajectory {
            knots: vec![Knot {
                t: t0,
                h: 0.0,
                rate: 0.0,
            }],
            t_end,
            depletion_time: Some(t0),
        });
    }

    let span = t_end - t0;
    let dt_min = 1e-12 * span.max(1.0);
    let dt_event = 1e-9 * span.max(1.0);
    let max_step = span / 16.0;
    let f = |h: f64| dynamics.rate(h);

    let mut t = t0;
    let mut y = ic.h0;
    let mut k1 = f(y);
    let mut knots = Vec::with_capacity(64);
    knots.push(Knot { t, h: y, rate: k1 });

    let mut dt = initial_step(y, k1, span, &f).min(max_step);
    let mut depletion_time = None;

    while t < t_end {
        let last = t_end - t <= dt;
        if last {
            dt = t_end - t;
        }

        let k2 = f(y + dt * (A21 * k1));
        let k3 = f(y + dt * (A31 * k1 + A32 * k2));
        let k4 = f(y + dt * (A41 * k1 + A42 * k2 + A43 * k3));
        let k5 = f(y + dt * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4));
        let k6 = f(y + dt * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5));
        let y_new = y + dt * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);

        if !y_new.is_finite() {
            dt *= 0.25;
            if dt < dt_min {
                return Err(Error::Solver {
                    t,
                    h: y,
                    reason: "non-finite state".into(),
                });
            }
            continue;
        }

        if y_new <= DEPLETION_FLOOR {
            // bisect towards the floor crossing
            if dt <= dt_event {
                let td = t + dt;
                knots.push(Knot {
                    t: td,
                    h: 0.0,
                    rate: 0.0,
                });
                depletion_time = Some(td);
                break;
            }
            dt *= 0.5;
            continue;
        }

        let k7 = f(y_new);
        let err_est = dt * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7);
        let scale = ATOL + RTOL * y.abs().max(y_new.abs());
        let err = (err_est / scale).abs();

        if err <= 1.0 {
            t = if last { t_end } else { t + dt };
            y = y_new;
            k1 = k7;
            knots.push(Knot { t, h: y, rate: k1 });
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            dt = (dt * factor).min(max_step);
        } else {
            dt *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            if dt < dt_min {
                return Err(Error::Solver {
                    t,
                    h: y,
                    reason: "step size underflow".into(),
                });
            }
        }
    }

    Ok(LevelTrajectory {
        knots,
        t_end,
        depletion_time,
    })
}

fn initial_step(y: f64, f0: f64, span: f64, f: &impl Fn(f64) -> f64) -> f64 {
    let sc = ATOL + RTOL * y.abs();
    let d0 = y.abs() / sc;
    let d1 = f0.abs() / sc;
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6 * span
    } else {
        0.01 * d0 / d1
    };
    let f1 = f(y + h0 * f0);
    let d2 = ((f1 - f0) / sc).abs() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Closed-form level for a prismatic tank of constant side length `x`.
///
/// `h(t) = max(0, √h0 − k (t − t0) / 2)²` with `k = c π r² √(2g) / x²`.
pub fn prism_level_closed_form(
    side: f64,
    orifice: &Orifice,
    constants: &PhysicalConstants,
    ic: &InitialCondition,
    t: f64,
) -> Result<f64> {
    if !(side.is_finite() && side > 0.0) {
        return Err(Error::domain(format!("side length must be positive, got {side}")));
    }
    orifice.validate()?;
    if !(ic.h0.is_finite() && ic.h0 >= 0.0) {
        return Err(Error::domain(format!("invalid initial level {}", ic.h0)));
    }
    if t.is_nan() || t < ic.t0 {
        return Err(Error::domain(format!("t = {t} precedes t0 = {}", ic.t0)));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let k = outflow_constant(orifice, constants) / (side * side);
    let root = (ic.h0.sqrt() - 0.5 * k * (t - ic.t0)).max(0.0);
    Ok(root * root)
}

/// Partial derivatives of a solved level `h(t)` with respect to the model inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelSensitivity {
    pub h_max: f64,
    pub x_t: f64,
    pub x_b: f64,
    pub discharge: f64,
    pub radius: f64,
    pub t0: f64,
    pub h0: f64,
}

/// Sensitivities of the level `h` reached at time `t` (with `t >= t0`).
///
/// Obtained by implicit differentiation of `G(h0) - G(h) = q (t - t0)`. Depleted
/// levels have zero sensitivity.
pub fn level_sensitivity(
    geom: &TankGeometry,
    orifice: &Orifice,
    constants: &PhysicalConstants,
    ic: &InitialCondition,
    t: f64,
    h: f64,
) -> LevelSensitivity {
    let dynamics = Dynamics::new(geom, orifice, constants);
    sensitivity_with(&dynamics, geom, orifice, constants, ic, t, h)
}

pub(crate) fn sensitivity_with(
    dynamics: &Dynamics,
    geom: &TankGeometry,
    orifice: &Orifice,
    constants: &PhysicalConstants,
    ic: &InitialCondition,
    t: f64,
    h: f64,
) -> LevelSensitivity {
    if h <= DEPLETION_FLOOR || ic.h0 <= DEPLETION_FLOOR {
        return LevelSensitivity::default();
    }
    let (x_b, m, h_max) = (dynamics.x_b, dynamics.slope, geom.h_max);
    // G(h) = 2 x_b² √h + (4/3) x_b m h^{3/2} + (2/5) m² h^{5/2}
    let partials = |h: f64| {
        let s = h.sqrt();
        let h32 = h * s;
        let h52 = h32 * h;
        let g_xb = 4.0 * x_b * s + (4.0 / 3.0) * m * h32;
        let g_m = (4.0 / 3.0) * x_b * h32 + 0.8 * m * h52;
        (g_xb, g_m)
    };
    let (gxb0, gm0) = partials(ic.h0);
    let (gxb, gm) = partials(h);
    let dg_prime = dynamics.area(h) / h.sqrt();

    // m = (x_t - x_b) / h_max
    let d_hmax = (gm0 - gm) * (-m / h_max);
    let d_xt = (gm0 - gm) / h_max;
    let d_xb = (gxb0 - gxb) - (gm0 - gm) / h_max;

    let root = std::f64::consts::PI * (2.0 * constants.gravity).sqrt();
    let q_c = root * orifice.radius.powi(2);
    let q_r = 2.0 * root * orifice.discharge * orifice.radius;
    let elapsed = t - ic.t0;

    LevelSensitivity {
        h_max: d_hmax / dg_prime,
        x_t: d_xt / dg_prime,
        x_b: d_xb / dg_prime,
        discharge: -q_c * elapsed / dg_prime,
        radius: -q_r * elapsed / dg_prime,
        t0: dynamics.q / dg_prime,
        h0: dynamics.area(ic.h0) / ic.h0.sqrt() / dg_prime,
    }
}
