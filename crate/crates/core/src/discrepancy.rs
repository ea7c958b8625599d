//! Empirical model discrepancy expressed in the Bernstein basis on `[0, h_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DEGREE: usize = 2;

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `C(n, ν) u^ν (1 - u)^(n - ν)` for `u ∈ [0, 1]`.
pub fn bernstein_basis(n: usize, nu: usize, u: f64) -> Result<f64> {
    if nu > n {
        return Err(Error::domain(format!("basis index {nu} exceeds degree {n}")));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::domain(format!("argument {u} outside [0, 1]")));
    }
    Ok(basis_unchecked(n, nu, u))
}

#[inline]
fn basis_unchecked(n: usize, nu: usize, u: f64) -> f64 {
    binomial(n, nu) * u.powi(nu as i32) * (1.0 - u).powi((n - nu) as i32)
}

/// Coefficients `a_0..=a_n` of a degree-`n` Bernstein discrepancy (cm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscrepancyCoefficients(Vec<f64>);

impl DiscrepancyCoefficients {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::domain("discrepancy needs at least one coefficient"));
        }
        if let Some(bad) = coeffs.iter().find(|a| !a.is_finite()) {
            return Err(Error::domain(format!("non-finite discrepancy coefficient {bad}")));
        }
        Ok(Self(coeffs))
    }

    pub fn zeros(degree: usize) -> Self {
        Self(vec![0.0; degree + 1])
    }

    pub fn degree(&self) -> usize {
        self.0.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// δ at relative level `u`. Values outside `[0, 1]` extend the polynomial.
    pub(crate) fn value_at(&self, u: f64) -> f64 {
        let n = self.degree();
        self.0
            .iter()
            .enumerate()
            .map(|(nu, a)| a * basis_unchecked(n, nu, u))
            .sum()
    }

    /// dδ/du at relative level `u`.
    pub(crate) fn slope_at(&self, u: f64) -> f64 {
        let n = self.degree();
        if n == 0 {
            return 0.0;
        }
        self.0
            .windows(2)
            .enumerate()
            .map(|(nu, w)| (w[1] - w[0]) * basis_unchecked(n - 1, nu, u))
            .sum::<f64>()
            * n as f64
    }

    /// Basis values `B_ν(u)`, i.e. dδ/da_ν.
    pub(crate) fn basis_at(&self, u: f64, out: &mut [f64]) {
        let n = self.degree();
        for (nu, slot) in out.iter_mut().enumerate().take(n + 1) {
            *slot = basis_unchecked(n, nu, u);
        }
    }
}

/// `δ_a(h) = Σ_ν a_ν B_{ν,n}(h / h_max)` for `h ∈ [0, h_max]`.
pub fn evaluate_discrepancy(coeffs: &DiscrepancyCoefficients, h: f64, h_max: f64) -> Result<f64> {
    if !(h_max.is_finite() && h_max > 0.0) {
        return Err(Error::domain(format!("h_max must be positive, got {h_max}")));
    }
    if !(0.0..=h_max).contains(&h) {
        return Err(Error::domain(format!("level {h} outside [0, {h_max}]")));
    }
    Ok(coeffs.value_at(h / h_max))
}

/// Model level plus the discrepancy evaluated at that same level.
pub fn corrected_level(model_level: f64, coeffs: &DiscrepancyCoefficients, h_max: f64) -> Result<f64> {
    Ok(model_level + evaluate_discrepancy(coeffs, model_level, h_max)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basis_examples() {
        assert_eq!(bernstein_basis(2, 0, 0.0).unwrap(), 1.0);
        assert_eq!(bernstein_basis(2, 1, 0.5).unwrap(), 0.5);
        let vals: Vec<f64> = (0..=2).map(|nu| bernstein_basis(2, nu, 0.5).unwrap()).collect();
        assert_eq!(vals, vec![0.25, 0.5, 0.25]);
        assert!(bernstein_basis(2, 3, 0.5).is_err());
        assert!(bernstein_basis(2, 1, 1.5).is_err());
        assert!(bernstein_basis(2, 1, -0.1).is_err());
    }

    #[test]
    fn discrepancy_examples() {
        let zero = DiscrepancyCoefficients::zeros(2);
        assert_eq!(evaluate_discrepancy(&zero, 3.3, 14.0).unwrap(), 0.0);
        let a = DiscrepancyCoefficients::new(vec![0.8, -0.3, 0.5]).unwrap();
        assert_eq!(evaluate_discrepancy(&a, 0.0, 14.0).unwrap(), 0.8);
        assert_eq!(evaluate_discrepancy(&a, 14.0, 14.0).unwrap(), 0.5);
        let ones = DiscrepancyCoefficients::new(vec![1.0; 3]).unwrap();
        assert!((evaluate_discrepancy(&ones, 5.0, 14.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(evaluate_discrepancy(&a, 14.5, 14.0).is_err());
    }

    #[test]
    fn corrected_level_examples() {
        let zero = DiscrepancyCoefficients::zeros(2);
        assert_eq!(corrected_level(6.0, &zero, 14.0).unwrap(), 6.0);
        let top = DiscrepancyCoefficients::new(vec![0.0, 0.0, 0.5]).unwrap();
        assert_eq!(corrected_level(14.0, &top, 14.0).unwrap(), 14.5);
        assert!(corrected_level(-1.0, &top, 14.0).is_err());
    }

    #[test]
    fn rejects_non_finite_coefficients() {
        assert!(DiscrepancyCoefficients::new(vec![0.0, f64::NAN]).is_err());
        assert!(DiscrepancyCoefficients::new(vec![]).is_err());
    }

    #[test]
    fn slope_matches_finite_difference() {
        let a = DiscrepancyCoefficients::new(vec![0.8, -0.3, 0.5, 0.1]).unwrap();
        for u in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let e = 1e-6;
            let fd = (a.value_at(u + e) - a.value_at(u - e)) / (2.0 * e);
            assert!((a.slope_at(u) - fd).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn linear_in_coefficients(
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
            h in 0.0f64..14.0,
        ) {
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let da = DiscrepancyCoefficients::new(a).unwrap();
            let db = DiscrepancyCoefficients::new(b).unwrap();
            let dab = DiscrepancyCoefficients::new(sum).unwrap();
            let lhs = corrected_level(h, &dab, 14.0).unwrap();
            let rhs = h + evaluate_discrepancy(&da, h, 14.0).unwrap()
                + evaluate_discrepancy(&db, h, 14.0).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn bounded_by_largest_coefficient(
            a in proptest::collection::vec(-5.0f64..5.0, 1..7),
            u in 0.0f64..=1.0,
        ) {
            let bound = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let d = DiscrepancyCoefficients::new(a).unwrap();
            prop_assert!(d.value_at(u).abs() <= bound + 1e-12);
        }
    }
}
