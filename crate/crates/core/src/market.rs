//! Model parameters and market data: calibrating instruments, Hull-White
//! rate dynamics, reference and generating models, numerical settings.

use crate::error::{invalid, Result};
use crate::grid::{Field2D, SpatialGrid2D, TimeGrid};
use crate::surface::TimeSurface;
use crate::spline::SplineKind;

/// A European call used for calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Instrument {
    pub maturity_days: u32,
    /// Maturity in model years.
    pub maturity: f64,
    pub strike: f64,
    /// Market price; zero until generated or loaded.
    pub price: f64,
}

impl Instrument {
    pub fn new(maturity_days: u32, year_days: f64, strike: f64) -> Result<Self> {
        if maturity_days == 0 {
            return invalid("instrument maturity must be positive");
        }
        if !(strike > 0.0) || !strike.is_finite() {
            return invalid(format!("instrument strike must be positive, got {strike}"));
        }
        Ok(Self { maturity_days, maturity: maturity_days as f64 / year_days, strike, price: 0.0 })
    }

    pub fn with_price(mut self, price: f64) -> Self {
        self.price = price;
        self
    }

    /// Raw call payoff on log-price.
    #[inline]
    pub fn payoff(&self, z: f64) -> f64 {
        (z.exp() - self.strike).max(0.0)
    }

    #[inline]
    pub fn smoothed_payoff(&self, z: f64, eps: f64) -> f64 {
        smoothed_call_payoff(z, self.strike, eps)
    }
}

/// Hull-White dynamics `dr = (b(t) - a r) dt + sigma_r dW` with the drift
/// sampled on the time grid and the rate rescaling constant used by the
/// solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct HullWhiteParams {
    pub a: f64,
    pub sigma_r: f64,
    /// Initial short rate, unscaled.
    pub r0: f64,
    /// Solvers work in `r_tilde = rate_scale * r`.
    pub rate_scale: f64,
    dt: f64,
    b: Vec<f64>,
}

impl HullWhiteParams {
    pub fn new(a: f64, sigma_r: f64, r0: f64, rate_scale: f64, time: &TimeGrid, b: impl Fn(f64) -> f64) -> Result<Self> {
        let samples = (0..=time.n_steps()).map(|k| b(time.t(k))).collect();
        Self::from_samples(a, sigma_r, r0, rate_scale, time, samples)
    }

    pub fn from_samples(a: f64, sigma_r: f64, r0: f64, rate_scale: f64, time: &TimeGrid, b: Vec<f64>) -> Result<Self> {
        if !(a > 0.0) {
            return invalid(format!("Hull-White mean reversion a must be positive, got {a}"));
        }
        if !(sigma_r > 0.0) {
            return invalid(format!("Hull-White volatility sigma_r must be positive, got {sigma_r}"));
        }
        if !(rate_scale > 0.0) {
            return invalid(format!("rate rescaling R must be positive, got {rate_scale}"));
        }
        if !r0.is_finite() {
            return invalid("initial rate must be finite");
        }
        if b.len() != time.n_steps() + 1 {
            return invalid(format!("drift has {} samples, time grid has {} nodes", b.len(), time.n_steps() + 1));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return invalid("Hull-White drift b(t) must be finite on [0, T]");
        }
        Ok(Self { a, sigma_r, r0, rate_scale, dt: time.dt(), b })
    }

    /// Flat-forward parametrization of the generating model.
    pub fn flat_fit(a: f64, sigma_r: f64, r0: f64, rate_scale: f64, time: &TimeGrid) -> Result<Self> {
        let b = hw_b_flat_fit(a, sigma_r, r0)?;
        Self::new(a, sigma_r, r0, rate_scale, time, b)
    }

    /// Drift at time `t`, linear between nodes and flat beyond the horizon.
    pub fn b(&self, t: f64) -> f64 {
        let x = (t / self.dt).max(0.0);
        let k = x.floor() as usize;
        if k + 1 >= self.b.len() {
            return *self.b.last().unwrap();
        }
        let w = x - k as f64;
        (1.0 - w) * self.b[k] + w * self.b[k + 1]
    }

    pub fn b_samples(&self) -> &[f64] {
        &self.b
    }

    /// Initial rate in solver units.
    pub fn r0_scaled(&self) -> f64 {
        self.r0 * self.rate_scale
    }

    /// `(1 - exp(-a tau)) / a`.
    pub fn bond_b(&self, tau: f64) -> f64 {
        -(-self.a * tau).exp_m1() / self.a
    }

    /// Closed-form zero-coupon bond `P(0, T)`: the integrated rate is Gaussian
    /// with mean `r0 B(0,T) + int b(s) B(s,T) ds` and the usual variance.
    pub fn bond_price(&self, maturity: f64) -> f64 {
        if maturity <= 0.0 {
            return 1.0;
        }
        let a = self.a;
        let t = maturity;
        // composite Simpson, several panels per time step
        let panels = (2 * ((t / self.dt).ceil() as usize) * 4).max(16);
        let h = t / panels as f64;
        let f = |s: f64| self.b(s) * self.bond_b(t - s);
        let mut acc = f(0.0) + f(t);
        for k in 1..panels {
            acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let drift_part = acc * h / 3.0;
        let mean = self.r0 * self.bond_b(t) + drift_part;
        let e1 = -(-a * t).exp_m1() / a;
        let e2 = -(-2.0 * a * t).exp_m1() / (2.0 * a);
        let var = self.sigma_r * self.sigma_r / (a * a) * (t - 2.0 * e1 + e2);
        (-mean + 0.5 * var).exp()
    }
}

/// Drift that makes the Hull-White forward curve flat at `r0`:
/// `b(t) = a r0 + sigma_r^2 / (2a) (1 - exp(-2at))`.
pub fn hw_b_flat_fit(a: f64, sigma_r: f64, r0: f64) -> Result<impl Fn(f64) -> f64 + Clone> {
    if a == 0.0 || !a.is_finite() {
        return invalid("hw_b_flat_fit needs a non-zero mean reversion");
    }
    Ok(move |t: f64| a * r0 + sigma_r * sigma_r / (2.0 * a) * (1.0 - (-2.0 * a * t).exp()))
}

/// Squared log-price diffusion coefficient of the CEV model `sigma S^(gamma-1)`.
#[inline]
pub fn cev_local_variance(z: f64, sigma: f64, gamma: f64) -> f64 {
    let v = sigma * (z * (gamma - 1.0)).exp();
    v * v
}

/// Smoothed call payoff with slope `(tanh((S-K)/eps) + 1) / 2`, evaluated in
/// the overflow-safe form `(S-K)^+ + eps/2 ln(1 + exp(-2|S-K|/eps))`.
#[inline]
pub fn smoothed_call_payoff(z: f64, strike: f64, eps: f64) -> f64 {
    let d = z.exp() - strike;
    d.max(0.0) + 0.5 * eps * (-2.0 * d.abs() / eps).exp().ln_1p()
}

/// CEV stock dynamics correlated with the Hull-White rate; produces the
/// synthetic market.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingModel {
    pub sigma: f64,
    pub gamma: f64,
    pub correlation: f64,
    /// Width of the payoff smoothing used in the HJB terminal data.
    pub payoff_smoothing: f64,
}

impl GeneratingModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return invalid(format!("generating sigma must be positive, got {}", self.sigma));
        }
        if !(self.gamma >= 0.0) {
            return invalid(format!("generating gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.correlation.abs() <= 1.0) {
            return invalid(format!("generating correlation must lie in [-1, 1], got {}", self.correlation));
        }
        if !(self.payoff_smoothing > 0.0) {
            return invalid("payoff smoothing width must be positive");
        }
        Ok(())
    }

    pub fn local_variance(&self, z: f64) -> f64 {
        cev_local_variance(z, self.sigma, self.gamma)
    }
}

/// The a-priori model the cost penalizes deviations from.
///
/// `sigma_bar_sq` is the reference variance and `xi_ref` the weight that pins
/// the stock/rate covariance to `xi_ref * sigma_r^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub sigma_bar_sq: TimeSurface,
    pub xi_ref: TimeSurface,
    pub p: f64,
}

impl ReferenceModel {
    /// CEV reference with constant correlation `rho`. The covariance weight is
    /// `rho * sigma_bar(z) / sigma_r`, so the reference covariance equals the
    /// CEV model's `rho sigma_bar sigma_r`.
    pub fn cev(grid: SpatialGrid2D, sigma: f64, gamma: f64, rho: f64, sigma_r: f64, p: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(gamma >= 0.0) {
            return invalid("reference CEV needs sigma > 0 and gamma >= 0");
        }
        let var = Field2D::from_fn(grid, |z, _| cev_local_variance(z, sigma, gamma));
        let xi = var.map(|v| rho * v.sqrt() / sigma_r);
        let m = Self { sigma_bar_sq: TimeSurface::Static(var), xi_ref: TimeSurface::Static(xi), p };
        m.validate(sigma_r)?;
        Ok(m)
    }

    /// Checks `p > 2`, `sigma_bar^2 > xi^2 sigma_r^2` and the correlation bound
    /// on every slice.
    pub fn validate(&self, sigma_r: f64) -> Result<()> {
        if !(self.p > 2.0) {
            return invalid(format!("cost exponent p must exceed 2, got {}", self.p));
        }
        let n = self.sigma_bar_sq.n_slices().max(self.xi_ref.n_slices());
        for k in 0..n {
            let var = self.sigma_bar_sq.at(k);
            let xi = self.xi_ref.at(k);
            var.same_grid(xi)?;
            for (idx, (&v, &x)) in var.values().iter().zip(xi.values()).enumerate() {
                let s = x * x * sigma_r * sigma_r;
                if !(v > s) {
                    return invalid(format!(
                        "reference variance must exceed xi_ref^2 sigma_r^2 (slice {k}, node {idx}: {v} <= {s})"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Penalty pole `xi_ref^2 sigma_r^2` at time node `k`.
    pub fn pole(&self, k: usize, sigma_r: f64) -> Field2D {
        self.xi_ref.at(k).map(|x| x * x * sigma_r * sigma_r)
    }
}

/// Time discretization of the backward sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// One backward-Euler step per interval.
    BackwardEuler,
    /// Second-order backward differentiation, falling back to one
    /// backward-Euler step after each maturity jump.
    #[default]
    Bdf2,
}

/// Tolerances and iteration limits.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSettings {
    /// Sup-norm gradient tolerance, implied-volatility units.
    pub tol_gradient: f64,
    /// Sup-norm change of phi that ends a policy iteration.
    pub tol_policy: f64,
    pub max_policy_iterations: usize,
    pub max_outer_iterations: usize,
    /// Sup-norm residual target of the linear solves.
    pub linear_tol: f64,
    pub smoothing_epochs: usize,
    /// Spline knots are taken every `spline_stride` nodes per axis.
    pub spline_stride: usize,
    pub spline: SplineKind,
    pub lbfgs_memory: usize,
    /// Calendar basis for the variance clock of quoted implied volatilities.
    pub iv_year_days: f64,
    pub time_scheme: TimeScheme,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            tol_gradient: 1e-4,
            tol_policy: 1e-8,
            max_policy_iterations: 100,
            max_outer_iterations: 200,
            linear_tol: 1e-10,
            smoothing_epochs: 0,
            spline_stride: 4,
            spline: SplineKind::default(),
            lbfgs_memory: 10,
            iv_year_days: 360.0,
            time_scheme: TimeScheme::default(),
        }
    }
}

impl CalibrationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_gradient > 0.0) || !(self.tol_policy > 0.0) || !(self.linear_tol > 0.0) {
            return invalid("tolerances eps1, eps2 and the linear-solver tolerance must be positive");
        }
        if self.max_policy_iterations == 0 || self.max_outer_iterations == 0 {
            return invalid("iteration limits must be positive");
        }
        if self.spline_stride == 0 || self.lbfgs_memory == 0 {
            return invalid("spline stride and L-BFGS memory must be positive");
        }
        if !(self.iv_year_days > 0.0) {
            return invalid("iv_year_days must be positive");
        }
        Ok(())
    }
}
