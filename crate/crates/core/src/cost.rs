//! Penalty on the stock variance, its derivative, and the closed-form
//! maximizer of `g x / 2 - H(x)` that defines the optimal characteristic.
//!
//! Powers are taken through `exp`/`ln` of positive quantities only.

use crate::error::{invalid, Result};

/// Arguments of the penalty: exponent `p`, pole `s` and reference value `x_bar`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub p: f64,
    pub s: f64,
    pub x_bar: f64,
}

impl CostParams {
    pub fn new(p: f64, s: f64, x_bar: f64) -> Result<Self> {
        if !(p > 2.0) {
            return invalid(format!("cost exponent p must exceed 2, got {p}"));
        }
        if !(x_bar > s) || !(s >= 0.0) {
            return invalid(format!("cost needs x_bar > s >= 0, got x_bar = {x_bar}, s = {s}"));
        }
        Ok(Self { p, s, x_bar })
    }
}

/// Admissible stock/rate characteristics at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharacteristicPoint {
    pub beta11: f64,
    pub beta12: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl CharacteristicPoint {
    /// Builds the point of the constraint set for a given `beta11`.
    pub fn on_constraint_set(beta11: f64, xi_ref: f64, sigma_r: f64, r: f64, b: f64, a: f64) -> Self {
        Self {
            beta11,
            beta12: xi_ref * sigma_r * sigma_r,
            alpha1: r - 0.5 * beta11,
            alpha2: b - a * r,
        }
    }

    /// Implied stock/rate correlation `beta12 / (sigma_r sqrt(beta11))`.
    pub fn correlation(&self, sigma_r: f64) -> f64 {
        self.beta12 / (sigma_r * self.beta11.sqrt())
    }

    /// Determinant of `[[beta11, beta12], [beta12, sigma_r^2]]`.
    pub fn det(&self, sigma_r: f64) -> f64 {
        self.beta11 * sigma_r * sigma_r - self.beta12 * self.beta12
    }
}

#[inline]
fn pow(x: f64, e: f64) -> f64 {
    (e * x.ln()).exp()
}

/// `(p-1) u^(1+p) + (p+1) u^(1-p) - 2p` with `u = (x-s)/(x_bar-s)`; `+inf`
/// outside `x, x_bar > s`.
pub fn h(x: f64, x_bar: f64, s: f64, p: f64) -> f64 {
    if !(x > s) || !(x_bar > s) {
        return f64::INFINITY;
    }
    let lu = ((x - s) / (x_bar - s)).ln();
    (p - 1.0) * ((1.0 + p) * lu).exp() + (p + 1.0) * ((1.0 - p) * lu).exp() - 2.0 * p
}

/// `dH/dx = (p^2-1)(u^p - u^-p) / (x_bar - s)`.
pub fn h_prime(x: f64, x_bar: f64, s: f64, p: f64) -> Result<f64> {
    if !(x > s) || !(x_bar > s) {
        return invalid(format!("H' is only defined for x, x_bar > s (x = {x}, x_bar = {x_bar}, s = {s})"));
    }
    let lu = ((x - s) / (x_bar - s)).ln();
    Ok((p * p - 1.0) * ((p * lu).exp() - (-p * lu).exp()) / (x_bar - s))
}

/// Unique `x > s` with `g / 2 = H'(x)`.
///
/// Writing `y = u^p` the stationarity condition is `y - 1/y = k` with
/// `k = g (x_bar - s) / (2 (p^2 - 1))`, whose positive root is taken in the
/// cancellation-free form.
#[inline]
pub fn optimal_beta11(g: f64, x_bar: f64, s: f64, p: f64) -> f64 {
    debug_assert!(x_bar > s);
    let w = x_bar - s;
    let k = g * w / (2.0 * (p * p - 1.0));
    let root = (k * k + 4.0).sqrt();
    let y = if k >= 0.0 { 0.5 * (k + root) } else { 2.0 / (root - k) };
    s + w * pow(y, 1.0 / p)
}

/// Checked variant of [`optimal_beta11`].
pub fn try_optimal_beta11(g: f64, c: &CostParams) -> Result<f64> {
    if !g.is_finite() {
        return invalid(format!("optimal_beta11 needs a finite curvature term, got {g}"));
    }
    Ok(optimal_beta11(g, c.x_bar, c.s, c.p))
}

/// The closed form exactly as printed in the source derivation, where the
/// `1/(x_bar - s)` chain-rule factor of `H'` is missing. Kept for
/// comparison against the brute-force maximizer only.
pub fn optimal_beta11_printed(g: f64, x_bar: f64, s: f64, p: f64) -> f64 {
    let q = pow(x_bar - s, p);
    let c = q * g / (4.0 * (p * p - 1.0));
    s + pow(c + (c * c + q * q).sqrt(), 1.0 / p)
}

/// `sup_x (g x / 2 - H(x))` and its maximizer, `g = phi_zz - phi_z`.
#[inline]
pub fn hamiltonian(phi_z: f64, phi_zz: f64, x_bar: f64, s: f64, p: f64) -> (f64, f64) {
    let g = phi_zz - phi_z;
    let b = optimal_beta11(g, x_bar, s, p);
    (0.5 * g * b - h(b, x_bar, s, p), b)
}
