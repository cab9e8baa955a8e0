//! European pricing under fixed local-volatility surfaces, and Black-Scholes
//! quoting.

use statrs::function::erf::erfc;

use crate::config::Problem;
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::fd::{apply_operator, model_coeffs, Closure, InteriorSystem, NodeCoeffs, Part};
use crate::grid::{Field2D, SpatialGrid2D, TimeGrid};
use crate::hjb::implicit_step_with;
use crate::linalg::solve_tridiagonal;
use crate::market::{GeneratingModel, HullWhiteParams, Instrument, ReferenceModel, TimeScheme};
use crate::surface::TimeSurface;

const DOUGLAS_THETA: f64 = 0.5;

/// Stock variance `beta11` and stock/rate covariance `beta12` (unscaled
/// rate units) as functions of time node and state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSurfaces {
    pub beta11: TimeSurface,
    pub beta12: TimeSurface,
}

impl ModelSurfaces {
    /// CEV stock correlated with the rate: `beta12 = rho sigma_loc sigma_r`.
    pub fn generating(grid: SpatialGrid2D, model: &GeneratingModel, sigma_r: f64) -> Result<Self> {
        model.validate()?;
        let var = Field2D::from_fn(grid, |z, _| model.local_variance(z));
        let cov = var.map(|v| model.correlation * v.sqrt() * sigma_r);
        Ok(Self { beta11: TimeSurface::Static(var), beta12: TimeSurface::Static(cov) })
    }

    pub fn reference(reference: &ReferenceModel, sigma_r: f64) -> Self {
        let s2 = sigma_r * sigma_r;
        Self { beta11: reference.sigma_bar_sq.clone(), beta12: reference.xi_ref.map(|x| x.map(|v| v * s2)) }
    }

    /// Calibrated variance slices with the reference covariance.
    pub fn calibrated(beta11: Vec<Field2D>, reference: &ReferenceModel, sigma_r: f64) -> Self {
        let s2 = sigma_r * sigma_r;
        Self { beta11: TimeSurface::Nodes(beta11), beta12: reference.xi_ref.map(|x| x.map(|v| v * s2)) }
    }

    /// Positive variance and a positive semi-definite covariance matrix everywhere.
    pub fn validate(&self, sigma_r: f64) -> Result<()> {
        let n = self.beta11.n_slices().max(self.beta12.n_slices());
        for k in 0..n {
            let (v, c) = (self.beta11.at(k), self.beta12.at(k));
            v.same_grid(c)?;
            for (node, (&b11, &b12)) in v.values().iter().zip(c.values()).enumerate() {
                if !(b11 > 0.0) || !b12.is_finite() {
                    return Err(Error::Numerical { node: k, what: format!("variance {b11} at grid node {node}") });
                }
                if b12 * b12 > b11 * sigma_r * sigma_r * (1.0 + 1e-12) {
                    return Err(Error::Numerical {
                        node: k,
                        what: format!("covariance matrix not positive semi-definite at grid node {node}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Time-0 values of a European claim.
#[derive(Debug, Clone)]
pub struct PriceResult {
    /// Value at the spot `(z0, r_tilde0)`.
    pub price: f64,
    pub values: Field2D,
}

/// Backward pricing on a fixed grid.
#[derive(Debug, Clone)]
pub struct Pricer {
    system: InteriorSystem,
    pub time: TimeGrid,
    pub hw: HullWhiteParams,
    pub spot: (f64, f64),
    pub linear_tol: f64,
    pub exec: Exec,
    /// Time scheme of [`Pricer::implicit_price`].
    pub scheme: TimeScheme,
}

impl Pricer {
    pub fn new(grid: SpatialGrid2D, time: TimeGrid, hw: HullWhiteParams, spot_z: f64, linear_tol: f64, exec: Exec) -> Result<Self> {
        let system = InteriorSystem::new(grid)?;
        let spot = (spot_z, hw.r0_scaled());
        Ok(Self { system, time, hw, spot, linear_tol, exec, scheme: TimeScheme::default() })
    }

    pub fn for_problem(problem: &Problem) -> Result<Self> {
        let mut p = Self::new(problem.grid, problem.time.clone(), problem.hw.clone(), problem.spot_z(), problem.settings.linear_tol, problem.exec)?;
        p.scheme = problem.settings.time_scheme;
        Ok(p)
    }

    pub fn grid(&self) -> &SpatialGrid2D {
        self.system.grid()
    }

    fn coeffs(&self, surfaces: &ModelSurfaces, k: usize) -> Vec<NodeCoeffs> {
        model_coeffs(self.grid(), &self.hw, self.time.t(k), surfaces.beta11.at(k), surfaces.beta12.at(k), self.exec)
    }

    fn check(&self, payoff: &Field2D, maturity_node: usize) -> Result<()> {
        if payoff.grid() != self.grid() {
            return Err(Error::GridMismatch);
        }
        payoff.check_finite("payoff")?;
        if maturity_node == 0 || maturity_node > self.time.n_steps() {
            return invalid(format!("maturity node {maturity_node} outside the time grid"));
        }
        Ok(())
    }

    /// Fully implicit pricing with the discretization of the HJB sweep: the
    /// boundary closure is refreshed and the multistep history restarted at
    /// every marked maturity.
    pub fn implicit_price(&self, surfaces: &ModelSurfaces, payoff: &Field2D, maturity_node: usize) -> Result<PriceResult> {
        self.check(payoff, maturity_node)?;
        let mut v = payoff.clone();
        let mut later: Option<Field2D> = None;
        let mut closure = Closure::from_slice(&v);
        let zero = vec![0.0; self.grid().len()];
        let dt = self.time.dt();
        for k in (0..maturity_node).rev() {
            if k + 1 < maturity_node && self.time.is_maturity(k + 1) {
                closure = Closure::from_slice(&v);
                later = None;
            }
            let coeffs = self.coeffs(surfaces, k);
            let (base, dt_eff) = match (self.scheme, &later) {
                (TimeScheme::Bdf2, Some(l)) => (v.zip_map(l, |a, b| (4.0 * a - b) / 3.0)?, 2.0 * dt / 3.0),
                _ => (v.clone(), dt),
            };
            let next = implicit_step_with(&self.system, &coeffs, &zero, &base, &v, &closure, dt_eff, self.linear_tol, self.exec)?.0;
            later = Some(std::mem::replace(&mut v, next));
        }
        Ok(self.result(v))
    }

    /// Douglas ADI: mixed derivative and discounting explicit, one implicit
    /// sweep per axis.
    pub fn adi_price(&self, surfaces: &ModelSurfaces, payoff: &Field2D, maturity_node: usize) -> Result<PriceResult> {
        self.check(payoff, maturity_node)?;
        let g = *self.grid();
        let (nz, nr) = (g.n_z, g.n_r);
        let dt = self.time.dt();
        let th = DOUGLAS_THETA * dt;
        let mut u = payoff.values().to_vec();
        let mut closure = Closure::from_slice(payoff);
        for k in (0..maturity_node).rev() {
            if k + 1 < maturity_node && self.time.is_maturity(k + 1) {
                closure = Closure::from_slice(&Field2D::from_raw(g, u.clone()));
            }
            let coeffs = self.coeffs(surfaces, k);
            let a0 = apply_operator(&g, &coeffs, &u, Part::Explicit, self.exec);
            let a1 = apply_operator(&g, &coeffs, &u, Part::Z, self.exec);
            let a2 = apply_operator(&g, &coeffs, &u, Part::R, self.exec);
            let mut y = vec![0.0; g.len()];
            for n in 0..g.len() {
                y[n] = u[n] + dt * (a0[n] + a1[n] + a2[n]) - th * a1[n];
            }
            // z sweeps, one line per interior rate node
            let lines = self.exec.map(nr - 2, |jj| {
                let j = jj + 1;
                line_solve(nz, g.h_z(), th, &closure.zz_lo[j], &closure.zz_hi[j], |i| coeffs[i * nr + j], |i| y[i * nr + j], true)
            });
            for (jj, line) in lines.into_iter().enumerate() {
                for (ii, v) in line.into_iter().enumerate() {
                    y[(ii + 1) * nr + jj + 1] = v;
                }
            }
            closure.fill(&g, &mut y);
            for n in 0..g.len() {
                y[n] -= th * a2[n];
            }
            let lines = self.exec.map(nz - 2, |ii| {
                let i = ii + 1;
                line_solve(nr, g.h_r(), th, &closure.rr_lo[i], &closure.rr_hi[i], |j| coeffs[i * nr + j], |j| y[i * nr + j], false)
            });
            for (ii, line) in lines.into_iter().enumerate() {
                for (jj, v) in line.into_iter().enumerate() {
                    u[(ii + 1) * nr + jj + 1] = v;
                }
            }
            closure.fill(&g, &mut u);
            if let Some(n) = u.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical { node: k, what: format!("ADI value not finite at grid node {n}") });
            }
        }
        Ok(self.result(Field2D::from_raw(g, u)))
    }

    /// Prices instrument `i` of `problem` with the raw call payoff.
    pub fn price_instrument(&self, problem: &Problem, surfaces: &ModelSurfaces, i: usize) -> Result<PriceResult> {
        let inst = &problem.instruments[i];
        let payoff = Field2D::from_fn(*self.grid(), |z, _| inst.payoff(z));
        self.adi_price(surfaces, &payoff, problem.maturity_node(i))
    }

    fn result(&self, values: Field2D) -> PriceResult {
        PriceResult { price: values.bilinear(self.spot.0, self.spot.1), values }
    }
}

/// Solves `(I - th A_axis) x = rhs` along one grid line with the boundary
/// values eliminated through the frozen second derivative `c_lo`/`c_hi`.
#[allow(clippy::too_many_arguments)]
fn line_solve(
    n: usize,
    h: f64,
    th: f64,
    c_lo: &f64,
    c_hi: &f64,
    coeff: impl Fn(usize) -> NodeCoeffs,
    rhs: impl Fn(usize) -> f64,
    along_z: bool,
) -> Vec<f64> {
    let m = n - 2;
    let mut lo = vec![0.0; m];
    let mut di = vec![0.0; m];
    let mut up = vec![0.0; m];
    let mut b = vec![0.0; m];
    for q in 0..m {
        let c = coeff(q + 1);
        let (d, mu) = if along_z { (c.d_zz, c.mu_z) } else { (c.d_rr, c.mu_r) };
        let l = d / (h * h) - mu / (2.0 * h);
        let u = d / (h * h) + mu / (2.0 * h);
        let mut dd = -2.0 * d / (h * h);
        let (mut ll, mut uu) = (l, u);
        let mut extra = 0.0;
        if q == 0 {
            // x_0 = 2 x_1 - x_2 + h^2 c_lo
            dd += 2.0 * l;
            uu -= l;
            ll = 0.0;
            extra += l * h * h * c_lo;
        }
        if q == m - 1 {
            dd += 2.0 * u;
            ll -= u;
            uu = 0.0;
            extra += u * h * h * c_hi;
        }
        lo[q] = -th * ll;
        di[q] = 1.0 - th * dd;
        up[q] = -th * uu;
        b[q] = rhs(q + 1) + th * extra;
    }
    let mut scratch = vec![0.0; m];
    solve_tridiagonal(&lo, &di, &up, &mut b, &mut scratch);
    b
}

/// Generating-model prices of every instrument (ADI, raw payoffs),
/// computed concurrently.
pub fn generate_market_prices(problem: &Problem) -> Result<Vec<f64>> {
    let surfaces = ModelSurfaces::generating(problem.grid, &problem.generating, problem.hw.sigma_r)?;
    price_calls(problem, &surfaces, &problem.instruments)
}

/// ADI prices of raw-payoff calls under `surfaces`, one call per task.
pub fn price_calls(problem: &Problem, surfaces: &ModelSurfaces, calls: &[Instrument]) -> Result<Vec<f64>> {
    let pricer = Pricer { exec: Exec::Sequential, ..Pricer::for_problem(problem)? };
    problem
        .exec
        .map(calls.len(), |i| {
            let inst = &calls[i];
            let payoff = Field2D::from_fn(problem.grid, |z, _| inst.payoff(z));
            pricer.adi_price(surfaces, &payoff, problem.time.node_of(inst.maturity)?).map(|r| r.price)
        })
        .into_iter()
        .collect()
}

#[inline]
fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Black-Scholes call with the discount factor `df` to expiry and variance
/// clock `tau`.
pub fn bs_price(spot: f64, strike: f64, tau: f64, df: f64, vol: f64) -> f64 {
    let fwd_k = strike * df;
    if tau <= 0.0 || vol <= 0.0 {
        return (spot - fwd_k).max(0.0);
    }
    let sd = vol * tau.sqrt();
    let d1 = ((spot / fwd_k).ln() + 0.5 * sd * sd) / sd;
    spot * norm_cdf(d1) - fwd_k * norm_cdf(d1 - sd)
}

/// Derivative of [`bs_price`] in the volatility.
pub fn bs_vega(spot: f64, strike: f64, tau: f64, df: f64, vol: f64) -> f64 {
    if tau <= 0.0 || vol <= 0.0 {
        return 0.0;
    }
    let sd = vol * tau.sqrt();
    let d1 = ((spot / (strike * df)).ln() + 0.5 * sd * sd) / sd;
    spot * norm_pdf(d1) * tau.sqrt()
}

/// Inverts [`bs_price`] by safeguarded Newton; fails outside the no-arbitrage bounds.
pub fn implied_vol(price: f64, spot: f64, strike: f64, tau: f64, df: f64) -> Result<f64> {
    let lower = (spot - strike * df).max(0.0);
    let upper = spot;
    if !(price > lower) || !(price < upper) || !(tau > 0.0) {
        return Err(Error::ArbitrageBounds { price, lower, upper });
    }
    let (mut lo, mut hi) = (1e-8, 1.0);
    while bs_price(spot, strike, tau, df, hi) < price {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::ArbitrageBounds { price, lower, upper });
        }
    }
    let mut v = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = bs_price(spot, strike, tau, df, v) - price;
        if f.abs() <= 1e-14 * price.max(1e-300) || hi - lo < 1e-15 {
            return Ok(v);
        }
        if f > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let vega = bs_vega(spot, strike, tau, df, v);
        let newton = v - f / vega;
        v = if vega > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(v)
}
