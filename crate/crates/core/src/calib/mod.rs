//! Outer dual optimization: vega scaling, the dual objective and its
//! gradient, L-BFGS over the multipliers and the reference smoothing epochs.

pub mod lbfgs;

use std::time::Instant;

use log::info;

use crate::config::Problem;
use crate::error::{invalid, Result};
use crate::grid::Field2D;
use crate::hjb::{HjbSolution, HjbSolver, JumpTerm, SolveOptions};
use crate::market::ReferenceModel;
use crate::pricing::{bs_vega, ModelSurfaces, Pricer};
use crate::spline::{smooth_field, SplineKind};
use crate::surface::TimeSurface;

pub use lbfgs::{lbfgs_minimize, IterationRecord, LbfgsResult, LbfgsSettings};

/// Black-Scholes vega (per unit volatility) of each instrument at its market
/// implied volatility. Dividing payoffs and prices by it makes the gradient
/// of the dual objective read as implied-volatility errors.
pub fn vega_scale(problem: &Problem) -> Result<Vec<f64>> {
    if !problem.has_prices() {
        return invalid("vega scaling needs market prices for every instrument");
    }
    (0..problem.instruments.len())
        .map(|i| {
            let inst = &problem.instruments[i];
            let iv = problem.implied_vol(i, inst.price)?;
            let v = bs_vega(problem.spot, inst.strike, problem.iv_tau(i), problem.iv_discount(i), iv);
            if !(v > 0.0) {
                return invalid(format!("instrument {i} has zero vega"));
            }
            Ok(v)
        })
        .collect()
}

/// Value and gradient of the dual objective at one multiplier vector.
#[derive(Debug, Clone)]
pub struct DualEval {
    pub lambda: Vec<f64>,
    pub l: f64,
    /// Market minus model price per instrument, vega-scaled.
    pub grad: Vec<f64>,
    pub solution: HjbSolution,
}

/// `L(lambda) = lambda . u - phi(0, z0, r0)` for vega-scaled prices `u`.
#[derive(Debug, Clone)]
pub struct DualObjective {
    pub solver: HjbSolver,
    pub scaled_prices: Vec<f64>,
    pub vegas: Vec<f64>,
}

impl DualObjective {
    pub fn new(problem: &Problem, reference: ReferenceModel, vegas: &[f64]) -> Result<Self> {
        let n = problem.instruments.len();
        if n == 0 {
            return invalid("calibration needs at least one instrument");
        }
        if vegas.len() != n {
            return invalid(format!("{} vegas for {n} instruments", vegas.len()));
        }
        let eps = problem.generating.payoff_smoothing;
        let jumps = problem
            .instruments
            .iter()
            .enumerate()
            .map(|(i, inst)| JumpTerm {
                node: problem.maturity_node(i),
                payoff: Field2D::from_fn(problem.grid, |z, _| inst.smoothed_payoff(z, eps) / vegas[i]),
            })
            .collect();
        let solver = HjbSolver::new(
            problem.grid,
            problem.time.clone(),
            problem.hw.clone(),
            reference,
            jumps,
            problem.settings.clone(),
            problem.spot_z(),
            problem.exec,
        )?;
        let scaled_prices = problem.instruments.iter().zip(vegas).map(|(i, v)| i.price / v).collect();
        Ok(Self { solver, scaled_prices, vegas: vegas.to_vec() })
    }

    pub fn evaluate(&self, lambda: &[f64]) -> Result<DualEval> {
        let solution = self.solver.solve(lambda, SolveOptions { keep_phi: false, sensitivities: true })?;
        let model = solution.sensitivities.as_ref().expect("sensitivities requested");
        let l = lambda.iter().zip(&self.scaled_prices).map(|(a, u)| a * u).sum::<f64>() - solution.value_at_spot;
        let grad = self.scaled_prices.iter().zip(model).map(|(u, m)| u - m).collect();
        Ok(DualEval { lambda: lambda.to_vec(), l, grad, solution })
    }

    /// Objective value only.
    pub fn value(&self, lambda: &[f64]) -> Result<f64> {
        let solution = self.solver.solve(lambda, SolveOptions::default())?;
        Ok(lambda.iter().zip(&self.scaled_prices).map(|(a, u)| a * u).sum::<f64>() - solution.value_at_spot)
    }
}

/// Multipliers, objective and gradient at the end of an optimization.
#[derive(Debug, Clone)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub l: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Quasi-Newton memory at exit, `(lambda step, gradient step)`.
    pub history: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DualState {
    pub fn grad_sup(&self) -> f64 {
        self.grad.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One row of the convergence log.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub iteration: usize,
    pub l: f64,
    pub grad_sup: f64,
    pub wall_ms: f64,
}

/// Per-epoch summary of the smoothing iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iterations: usize,
    pub grad_sup: f64,
    /// Total variation of the calibrated variance summed over time slices.
    pub total_variation: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub state: DualState,
    /// Optimal variance per time step.
    pub beta11: Vec<Field2D>,
    /// Reference model of the final epoch.
    pub reference: ReferenceModel,
    pub vegas: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub epochs: Vec<EpochSummary>,
    pub wall_s: f64,
}

impl CalibrationResult {
    pub fn surfaces(&self, sigma_r: f64) -> ModelSurfaces {
        ModelSurfaces::calibrated(self.beta11.clone(), &self.reference, sigma_r)
    }

    pub fn converged(&self) -> bool {
        self.state.converged
    }
}

/// Summed total variation of the variance slices.
pub fn surface_total_variation(beta11: &[Field2D]) -> f64 {
    beta11.iter().map(Field2D::total_variation).sum()
}

fn lbfgs_settings(problem: &Problem) -> LbfgsSettings {
    let s = &problem.settings;
    LbfgsSettings {
        memory: s.lbfgs_memory,
        max_iterations: s.max_outer_iterations,
        tol_gradient: s.tol_gradient,
        ..LbfgsSettings::default()
    }
}

/// Maximizes the dual objective for a fixed reference model.
pub fn lbfgs_calibrate(objective: &DualObjective, lambda0: &[f64], settings: &LbfgsSettings, epoch: usize) -> Result<(DualState, DualEval, Vec<TraceRow>)> {
    let mut best: Option<DualEval> = None;
    let result = lbfgs_minimize(
        |x| {
            let e = objective.evaluate(x)?;
            let out = (-e.l, e.grad.iter().map(|g| -g).collect());
            let better = best.as_ref().is_none_or(|b| e.l >= b.l || x == b.lambda.as_slice());
            if better {
                best = Some(e);
            }
            Ok(out)
        },
        lambda0,
        settings,
    )?;
    // the last accepted iterate is the one returned by the optimizer
    let eval = match best {
        Some(b) if b.lambda == result.x => b,
        _ => objective.evaluate(&result.x)?,
    };
    let state = DualState {
        lambda: result.x.clone(),
        l: -result.f,
        grad: result.grad.iter().map(|g| -g).collect(),
        iterations: result.iterations,
        converged: result.converged,
        history: result.pairs.iter().map(|(s, y)| (s.clone(), y.iter().map(|v| -v).collect())).collect(),
    };
    let trace = result
        .history
        .iter()
        .map(|h| TraceRow { epoch, iteration: h.iteration, l: -h.f, grad_sup: h.grad_sup, wall_ms: h.wall_ms })
        .collect();
    Ok((state, eval, trace))
}

/// Single calibration against `reference`, starting from `lambda0`
/// (zero when `None`).
pub fn calibrate(problem: &Problem, reference: ReferenceModel, lambda0: Option<&[f64]>) -> Result<CalibrationResult> {
    let start = Instant::now();
    let vegas = vega_scale(problem)?;
    let objective = DualObjective::new(problem, reference.clone(), &vegas)?;
    let zeros = vec![0.0; problem.instruments.len()];
    let (state, eval, trace) = lbfgs_calibrate(&objective, lambda0.unwrap_or(&zeros), &lbfgs_settings(problem), 0)?;
    let tv = surface_total_variation(&eval.solution.beta11);
    info!(
        "calibration finished: {} iterations, |grad| = {:.3e}, converged = {}",
        state.iterations,
        state.grad_sup(),
        state.converged
    );
    let epochs = vec![EpochSummary {
        epoch: 0,
        iterations: state.iterations,
        grad_sup: state.grad_sup(),
        total_variation: tv,
        converged: state.converged,
    }];
    Ok(CalibrationResult {
        state,
        beta11: eval.solution.beta11,
        reference,
        vegas,
        trace,
        epochs,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Spline-smoothed variance slices installed as a new reference. The pole
/// of the penalty is kept, and the smoothed variance is floored a tenth of
/// the previous gap above it.
pub fn smoothed_reference(beta11: &[Field2D], previous: &ReferenceModel, sigma_r: f64, stride: usize, kind: SplineKind) -> Result<ReferenceModel> {
    let mut slices = Vec::with_capacity(beta11.len());
    for (k, b) in beta11.iter().enumerate() {
        let sm = smooth_field(b, stride, kind)?;
        let pole = previous.pole(k, sigma_r);
        let prev = previous.sigma_bar_sq.at(k);
        let v: Vec<f64> = sm
            .values()
            .iter()
            .zip(pole.values())
            .zip(prev.values())
            .map(|((&x, &s), &xb)| x.max(s + 0.1 * (xb - s)))
            .collect();
        slices.push(Field2D::from_values(*b.grid(), v)?);
    }
    let reference = ReferenceModel { sigma_bar_sq: TimeSurface::Nodes(slices), xi_ref: previous.xi_ref.clone(), p: previous.p };
    reference.validate(sigma_r)?;
    Ok(reference)
}

/// Runs `epochs` rounds of smoothing the calibrated variance into a new
/// reference and recalibrating from the previous multipliers. The last
/// round is a plain calibration of the last smoothed reference.
pub fn smooth_and_recalibrate(problem: &Problem, first: CalibrationResult, epochs: usize) -> Result<CalibrationResult> {
    let start = Instant::now();
    let mut current = first;
    let settings = lbfgs_settings(problem);
    for epoch in 1..=epochs {
        let reference = smoothed_reference(&current.beta11, &current.reference, problem.hw.sigma_r, problem.settings.spline_stride, problem.settings.spline)?;
        let objective = DualObjective::new(problem, reference.clone(), &current.vegas)?;
        let (state, eval, trace) = lbfgs_calibrate(&objective, &current.state.lambda, &settings, epoch)?;
        let tv = surface_total_variation(&eval.solution.beta11);
        info!(
            "epoch {epoch}: {} iterations, |grad| = {:.3e}, total variation {tv:.6e}",
            state.iterations,
            state.grad_sup()
        );
        current.epochs.push(EpochSummary {
            epoch,
            iterations: state.iterations,
            grad_sup: state.grad_sup(),
            total_variation: tv,
            converged: state.converged,
        });
        current.trace.extend(trace);
        current.state = state;
        current.beta11 = eval.solution.beta11;
        current.reference = reference;
    }
    current.wall_s += start.elapsed().as_secs_f64();
    Ok(current)
}

/// Calibration followed by the configured number of smoothing epochs.
pub fn run_calibration(problem: &Problem) -> Result<CalibrationResult> {
    let first = calibrate(problem, problem.reference.clone(), None)?;
    if problem.settings.smoothing_epochs == 0 {
        return Ok(first);
    }
    smooth_and_recalibrate(problem, first, problem.settings.smoothing_epochs)
}

/// Market and model quotes of one instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub maturity_days: u32,
    pub strike: f64,
    pub market_price: f64,
    pub model_price: f64,
    pub market_iv: f64,
    pub model_iv: f64,
    /// Gradient component at the final multipliers, implied-volatility units.
    pub grad: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub rows: Vec<ReportRow>,
    pub grad_sup: f64,
    pub outer_iterations: usize,
    pub epochs: usize,
    pub wall_s: f64,
    pub converged: bool,
}

impl CalibrationReport {
    /// Reprices every instrument under the calibrated surfaces with the ADI
    /// scheme and raw payoffs.
    pub fn build(problem: &Problem, result: &CalibrationResult) -> Result<Self> {
        let pricer = Pricer::for_problem(problem)?;
        let surfaces = result.surfaces(problem.hw.sigma_r);
        let mut rows = Vec::with_capacity(problem.instruments.len());
        for (i, inst) in problem.instruments.iter().enumerate() {
            let model_price = pricer.price_instrument(problem, &surfaces, i)?.price;
            rows.push(ReportRow {
                maturity_days: inst.maturity_days,
                strike: inst.strike,
                market_price: inst.price,
                model_price,
                market_iv: problem.implied_vol(i, inst.price)?,
                model_iv: problem.implied_vol(i, model_price)?,
                grad: result.state.grad[i],
            });
        }
        Ok(Self {
            rows,
            grad_sup: result.state.grad_sup(),
            outer_iterations: result.epochs.iter().map(|e| e.iterations).sum(),
            epochs: result.epochs.len() - 1,
            wall_s: result.wall_s,
            converged: result.converged(),
        })
    }
}
