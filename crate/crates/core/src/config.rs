//! TOML run configuration and the validated [`Problem`] built from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{SpatialGrid2D, TimeGrid};
use crate::market::{CalibrationSettings, GeneratingModel, HullWhiteParams, Instrument, ReferenceModel, TimeScheme};
use crate::spline::SplineKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub z_min: f64,
    pub z_max: f64,
    /// Rescaled rate bounds, `r_tilde = rate_scale * r`.
    pub r_min: f64,
    pub r_max: f64,
    pub n_z: usize,
    pub n_r: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon_days: usize,
    #[serde(default = "one")]
    pub steps_per_day: usize,
    /// Days per model year; the time step is `1 / (year_days * steps_per_day)`.
    #[serde(default = "days_365")]
    pub year_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub spot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HullWhiteConfig {
    pub a: f64,
    pub sigma_r: f64,
    /// Unscaled initial short rate.
    pub r0: f64,
    #[serde(default = "rate_scale")]
    pub rate_scale: f64,
}

/// CEV model block, used for both the reference and the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CevConfig {
    pub sigma: f64,
    pub gamma: f64,
    /// Stock/rate correlation.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(flatten)]
    pub cev: CevConfig,
    /// Cost exponent, must exceed 2.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratingConfig {
    #[serde(flatten)]
    pub cev: CevConfig,
    /// Smoothing width of the call payoffs in the HJB terminal data, price units.
    #[serde(default = "half")]
    pub payoff_smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentConfig {
    pub maturity_days: u32,
    pub strike: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SettingsConfig {
    pub tol_gradient: f64,
    pub tol_policy: f64,
    pub max_policy_iterations: usize,
    pub max_outer_iterations: usize,
    pub linear_tol: f64,
    pub smoothing_epochs: usize,
    pub spline_stride: usize,
    pub spline: SplineKind,
    pub lbfgs_memory: usize,
    pub iv_year_days: f64,
    pub time_scheme: TimeScheme,
    pub parallel: bool,
}

impl Default for SettingsConfig {
    fn default() -> Self {
        let s = CalibrationSettings::default();
        Self {
            tol_gradient: s.tol_gradient,
            tol_policy: s.tol_policy,
            max_policy_iterations: s.max_policy_iterations,
            max_outer_iterations: s.max_outer_iterations,
            linear_tol: s.linear_tol,
            smoothing_epochs: s.smoothing_epochs,
            spline_stride: s.spline_stride,
            spline: s.spline,
            lbfgs_memory: s.lbfgs_memory,
            iv_year_days: s.iv_year_days,
            time_scheme: s.time_scheme,
            parallel: true,
        }
    }
}

/// Monte Carlo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub paths: usize,
    pub seed: u64,
    /// Euler steps per step of the time grid.
    pub substeps: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { paths: 100_000, seed: 20_240_601, substeps: 1 }
    }
}

fn one() -> usize {
    1
}
fn days_365() -> f64 {
    365.0
}
fn rate_scale() -> f64 {
    100.0
}
fn half() -> f64 {
    0.5
}

/// Whole configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub market: MarketConfig,
    pub hullwhite: HullWhiteConfig,
    pub reference: ReferenceConfig,
    pub generating: GeneratingConfig,
    pub instruments: Vec<InstrumentConfig>,
    #[serde(default)]
    pub settings: SettingsConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

/// Which reference model of the simulated-data study to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandardReference {
    Good,
    Bad,
}

impl Config {
    /// The simulated-data study: CEV generating model under Hull-White
    /// rates, calls at 60 and 120 days on the strike ladder 85..120.
    pub fn standard(reference: StandardReference) -> Self {
        let (sigma, gamma, correlation) = match reference {
            StandardReference::Good => (0.9, 0.9, -0.4),
            StandardReference::Bad => (1.2, 0.78, 0.4),
        };
        let instruments = [60u32, 120]
            .iter()
            .flat_map(|&d| [85.0, 92.0, 99.0, 106.0, 113.0, 120.0].map(|k| InstrumentConfig { maturity_days: d, strike: k, price: None }))
            .collect();
        Self {
            grid: GridConfig { z_min: 4.0, z_max: 5.0, r_min: 0.0, r_max: 5.0, n_z: 100, n_r: 100 },
            time: TimeConfig { horizon_days: 120, steps_per_day: 1, year_days: 365.0 },
            market: MarketConfig { spot: 92.0 },
            hullwhite: HullWhiteConfig { a: 0.4, sigma_r: 0.05, r0: 0.025, rate_scale: 100.0 },
            reference: ReferenceConfig { cev: CevConfig { sigma, gamma, correlation }, p: 4.0 },
            generating: GeneratingConfig {
                cev: CevConfig { sigma: 0.78, gamma: 0.9, correlation: -0.6 },
                payoff_smoothing: 0.5,
            },
            instruments,
            settings: SettingsConfig::default(),
            simulation: SimulationConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_grid(mut self, n_z: usize, n_r: usize) -> Self {
        self.grid.n_z = n_z;
        self.grid.n_r = n_r;
        self
    }

    /// Validates every block and builds the numerical problem.
    pub fn to_problem(&self) -> Result<Problem> {
        let cfg = |e: Error| Error::Config(e.to_string());
        let g = &self.grid;
        let grid = SpatialGrid2D::new(g.z_min, g.z_max, g.r_min, g.r_max, g.n_z, g.n_r).map_err(cfg)?;
        if g.n_z < 4 || g.n_r < 4 {
            return Err(Error::Config(format!("grid needs at least 4 nodes per axis, got {}x{}", g.n_z, g.n_r)));
        }
        let t = &self.time;
        let mut time = TimeGrid::daily(t.horizon_days, t.steps_per_day, t.year_days).map_err(cfg)?;
        if !(self.market.spot > 0.0) {
            return Err(Error::Config(format!("spot must be positive, got {}", self.market.spot)));
        }
        let spot_z = self.market.spot.ln();
        if spot_z <= grid.z_min || spot_z >= grid.z_max {
            return Err(Error::Config(format!("log-spot {spot_z} lies outside the z range of the grid")));
        }
        let mut instruments = Vec::with_capacity(self.instruments.len());
        for ic in &self.instruments {
            if ic.maturity_days as usize > t.horizon_days {
                return Err(Error::Config(format!(
                    "instrument maturity {} days exceeds the horizon of {} days",
                    ic.maturity_days, t.horizon_days
                )));
            }
            let mut inst = Instrument::new(ic.maturity_days, t.year_days, ic.strike).map_err(cfg)?;
            time.mark_maturity(inst.maturity).map_err(cfg)?;
            if let Some(p) = ic.price {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::Config(format!("instrument price must be positive, got {p}")));
                }
                inst = inst.with_price(p);
            }
            instruments.push(inst);
        }
        let h = &self.hullwhite;
        let hw = HullWhiteParams::flat_fit(h.a, h.sigma_r, h.r0, h.rate_scale, &time).map_err(cfg)?;
        let r0s = hw.r0_scaled();
        if r0s <= grid.r_min || r0s >= grid.r_max {
            return Err(Error::Config(format!("scaled initial rate {r0s} lies outside the r range of the grid")));
        }
        let rc = &self.reference;
        let reference = ReferenceModel::cev(grid, rc.cev.sigma, rc.cev.gamma, rc.cev.correlation, h.sigma_r, rc.p).map_err(cfg)?;
        let gc = &self.generating;
        let generating = GeneratingModel {
            sigma: gc.cev.sigma,
            gamma: gc.cev.gamma,
            correlation: gc.cev.correlation,
            payoff_smoothing: gc.payoff_smoothing,
        };
        generating.validate().map_err(cfg)?;
        let s = &self.settings;
        let settings = CalibrationSettings {
            tol_gradient: s.tol_gradient,
            tol_policy: s.tol_policy,
            max_policy_iterations: s.max_policy_iterations,
            max_outer_iterations: s.max_outer_iterations,
            linear_tol: s.linear_tol,
            smoothing_epochs: s.smoothing_epochs,
            spline_stride: s.spline_stride,
            spline: s.spline,
            lbfgs_memory: s.lbfgs_memory,
            iv_year_days: s.iv_year_days,
            time_scheme: s.time_scheme,
        };
        settings.validate().map_err(cfg)?;
        let sim = &self.simulation;
        if sim.paths < 2 || sim.substeps == 0 {
            return Err(Error::Config("simulation needs at least 2 paths and one substep".into()));
        }
        Ok(Problem {
            grid,
            time,
            year_days: t.year_days,
            spot: self.market.spot,
            hw,
            reference,
            generating,
            instruments,
            settings,
            simulation: sim.clone(),
            exec: if s.parallel { Exec::Parallel } else { Exec::Sequential },
        })
    }
}

/// A validated calibration problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: SpatialGrid2D,
    /// Time grid with every instrument maturity marked.
    pub time: TimeGrid,
    /// Days per model year.
    pub year_days: f64,
    pub spot: f64,
    pub hw: HullWhiteParams,
    pub reference: ReferenceModel,
    pub generating: GeneratingModel,
    pub instruments: Vec<Instrument>,
    pub settings: CalibrationSettings,
    pub simulation: SimulationConfig,
    pub exec: Exec,
}

impl Problem {
    pub fn spot_z(&self) -> f64 {
        self.spot.ln()
    }

    /// Time node of instrument `i`'s maturity.
    pub fn maturity_node(&self, i: usize) -> usize {
        self.time.node_of(self.instruments[i].maturity).expect("maturities are marked at construction")
    }

    /// Variance clock used when quoting instrument `i` as an implied volatility.
    pub fn iv_tau(&self, i: usize) -> f64 {
        self.instruments[i].maturity_days as f64 / self.settings.iv_year_days
    }

    /// Discount factor used when quoting instrument `i`.
    pub fn iv_discount(&self, i: usize) -> f64 {
        self.hw.bond_price(self.instruments[i].maturity)
    }

    pub fn implied_vol(&self, i: usize, price: f64) -> Result<f64> {
        self.quote_iv(&self.instruments[i], price)
    }

    /// A call on the model clock, not necessarily one of the instruments.
    pub fn call(&self, maturity_days: u32, strike: f64) -> Result<Instrument> {
        let inst = Instrument::new(maturity_days, self.year_days, strike)?;
        self.time.node_of(inst.maturity)?;
        Ok(inst)
    }

    /// Implied volatility of `price` for `inst` under the quoting convention.
    pub fn quote_iv(&self, inst: &Instrument, price: f64) -> Result<f64> {
        let tau = inst.maturity_days as f64 / self.settings.iv_year_days;
        crate::pricing::implied_vol(price, self.spot, inst.strike, tau, self.hw.bond_price(inst.maturity))
    }

    pub fn has_prices(&self) -> bool {
        self.instruments.iter().all(|i| i.price > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_round_trips_through_toml() {
        let c = Config::standard(StandardReference::Bad);
        let s = c.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&s).unwrap(), c);
    }

    #[test]
    fn standard_problem() {
        let p = Config::standard(StandardReference::Good).to_problem().unwrap();
        assert_eq!(p.instruments.len(), 12);
        assert_eq!(p.time.maturity_nodes(), &[60, 120]);
        assert_eq!(p.maturity_node(11), 120);
        assert!((p.hw.r0_scaled() - 2.5).abs() < 1e-12);
        assert!((p.iv_tau(0) - 60.0 / 360.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = Config::standard(StandardReference::Good);
        c.instruments[0].maturity_days = 150;
        assert!(matches!(c.to_problem(), Err(Error::Config(_))));
        let mut c = Config::standard(StandardReference::Good);
        c.market.spot = 1000.0;
        assert!(c.to_problem().is_err());
        let mut c = Config::standard(StandardReference::Good);
        c.reference.p = 2.0;
        assert!(c.to_problem().is_err());
        assert!(Config::from_toml_str("[grid]\nz_min = 1").is_err());
    }
}
