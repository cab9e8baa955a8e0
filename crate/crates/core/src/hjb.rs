//! Backward solution of the dual HJB equation by policy iteration.

use log::{debug, warn};

use crate::cost::{h, optimal_beta11};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::fd::{model_coeffs, Closure, InteriorSystem, NodeCoeffs};
use crate::grid::{zz_minus_z, Field2D, SpatialGrid2D, TimeGrid};
use crate::linalg::{bicgstab, CsrMatrix, Ilu0};
use crate::market::{CalibrationSettings, HullWhiteParams, ReferenceModel, TimeScheme};

const MAX_LINEAR_ITERATIONS: usize = 2000;

/// Terminal payoff of one instrument, already vega-scaled and sampled on the
/// grid, applied at time node `node`.
#[derive(Debug, Clone)]
pub struct JumpTerm {
    pub node: usize,
    pub payoff: Field2D,
}

/// `phi + sum lambda_i G_i` over the instruments maturing at `node`.
pub fn apply_jump(phi: &Field2D, lambda: &[f64], jumps: &[JumpTerm], node: usize) -> Result<Field2D> {
    if lambda.len() != jumps.len() {
        return invalid(format!("{} multipliers for {} instruments", lambda.len(), jumps.len()));
    }
    let mut out = phi.clone();
    for (l, j) in lambda.iter().zip(jumps) {
        if j.node == node && *l != 0.0 {
            out = out.zip_map(&j.payoff, |a, g| a + l * g)?;
        }
    }
    Ok(out)
}

/// One backward-Euler step `(I - dt L) phi_k = phi_next + dt * source` on the
/// interior, boundary closed by `closure`. Returns the solution on the full
/// grid together with the factorized system, which callers reuse for
/// linearized solves.
pub fn implicit_step_with(
    system: &InteriorSystem,
    coeffs: &[NodeCoeffs],
    source: &[f64],
    phi_next: &Field2D,
    guess: &Field2D,
    closure: &Closure,
    dt: f64,
    tol: f64,
    exec: Exec,
) -> Result<(Field2D, StepSystem)> {
    let (a, offset) = system.assemble(coeffs, dt, closure, exec);
    let pre = Ilu0::new(&a)?;
    let step = StepSystem { a, pre, coeffs: coeffs.to_vec(), dt };
    let next = phi_next.values();
    let rhs: Vec<f64> = (0..system.n())
        .map(|p| {
            let node = system.node(p);
            next[node] + dt * source[node] + offset[p]
        })
        .collect();
    let mut x = system.gather(guess.values());
    bicgstab(&step.a, &step.pre, &rhs, &mut x, tol, MAX_LINEAR_ITERATIONS, exec)?;
    let phi = system.scatter(&x, closure);
    phi.check_finite("implicit step")?;
    Ok((phi, step))
}

/// Factorized `I - dt L` of a time step.
pub struct StepSystem {
    pub a: CsrMatrix,
    pub pre: Ilu0,
    coeffs: Vec<NodeCoeffs>,
    dt: f64,
}

impl StepSystem {
    /// Solves the step for a source-free field, e.g. a price sensitivity,
    /// with right-hand side `base` and initial guess `guess`.
    pub fn solve_linear(&self, system: &InteriorSystem, base: &Field2D, guess: &Field2D, closure: &Closure, tol: f64, exec: Exec) -> Result<Field2D> {
        let offset = system.closure_offset(&self.coeffs, self.dt, closure, exec);
        let v = base.values();
        let rhs: Vec<f64> = (0..system.n()).map(|p| v[system.node(p)] + offset[p]).collect();
        let mut x = system.gather(guess.values());
        bicgstab(&self.a, &self.pre, &rhs, &mut x, tol, MAX_LINEAR_ITERATIONS, exec)?;
        Ok(system.scatter(&x, closure))
    }
}

/// Result of a policy iteration over one time step.
pub struct PolicyStep {
    pub phi: Field2D,
    /// Policy the returned `phi` was computed with.
    pub beta11: Field2D,
    pub iterations: usize,
    /// Sup-norm update of every iterate.
    pub changes: Vec<f64>,
    pub system: StepSystem,
}

/// Linearized sweep state of one instrument.
#[derive(Debug, Clone)]
struct Sensitivity {
    current: Field2D,
    later: Option<Field2D>,
    closure: Closure,
}

/// Options for [`HjbSolver::solve`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveOptions {
    /// Keep `phi` at every time node (otherwise only `t = 0`).
    pub keep_phi: bool,
    /// Also propagate the model prices of every scaled payoff under the
    /// optimal policy (the gradient of the value at spot in `lambda`).
    pub sensitivities: bool,
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    /// `phi` at time nodes `0..=N` if kept, otherwise only `phi(0)`.
    pub phi: Vec<Field2D>,
    /// Optimal variance on `[t_k, t_k+1)`, one slice per step.
    pub beta11: Vec<Field2D>,
    pub value_at_spot: f64,
    /// Model prices (scaled payoff units) of each instrument, if requested.
    pub sensitivities: Option<Vec<f64>>,
    /// Same prices as fields at `t = 0`.
    pub sensitivity_fields: Option<Vec<Field2D>>,
    pub policy_iterations: Vec<usize>,
    /// Steps whose update sequence was not decreasing after the first iterate.
    pub non_monotone_steps: usize,
}

impl HjbSolution {
    pub fn phi0(&self) -> &Field2D {
        &self.phi[0]
    }
}

/// Everything a backward HJB sweep needs.
#[derive(Debug, Clone)]
pub struct HjbSolver {
    system: InteriorSystem,
    pub time: TimeGrid,
    pub hw: HullWhiteParams,
    pub reference: ReferenceModel,
    pub jumps: Vec<JumpTerm>,
    pub settings: CalibrationSettings,
    /// Evaluation point `(z0, r_tilde0)`.
    pub spot: (f64, f64),
    pub exec: Exec,
}

impl HjbSolver {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: SpatialGrid2D,
        time: TimeGrid,
        hw: HullWhiteParams,
        reference: ReferenceModel,
        jumps: Vec<JumpTerm>,
        settings: CalibrationSettings,
        spot_z: f64,
        exec: Exec,
    ) -> Result<Self> {
        let system = InteriorSystem::new(grid)?;
        reference.validate(hw.sigma_r)?;
        settings.validate()?;
        for j in &jumps {
            if *j.payoff.grid() != grid {
                return Err(Error::GridMismatch);
            }
            if j.node == 0 || j.node > time.n_steps() || !time.is_maturity(j.node) {
                return invalid(format!("jump at node {} is not a marked maturity", j.node));
            }
        }
        for k in 0..reference.sigma_bar_sq.n_slices().max(reference.xi_ref.n_slices()) {
            if *reference.sigma_bar_sq.at(k).grid() != grid || *reference.xi_ref.at(k).grid() != grid {
                return Err(Error::GridMismatch);
            }
        }
        let spot = (spot_z, hw.r0_scaled());
        Ok(Self { system, time, hw, reference, jumps, settings, spot, exec })
    }

    pub fn grid(&self) -> &SpatialGrid2D {
        self.system.grid()
    }

    pub fn system(&self) -> &InteriorSystem {
        &self.system
    }

    /// Covariance field `xi_ref sigma_r^2` at step `k`.
    pub fn beta12(&self, k: usize) -> Field2D {
        let s2 = self.hw.sigma_r * self.hw.sigma_r;
        self.reference.xi_ref.at(k).map(|x| x * s2)
    }

    /// Optimal variance for the curvature of `phi` at step `k`.
    pub fn optimal_policy(&self, phi: &Field2D, k: usize) -> Field2D {
        let g = zz_minus_z(phi);
        let xbar = self.reference.sigma_bar_sq.at(k).values();
        let s = self.reference.pole(k, self.hw.sigma_r);
        let s = s.values();
        let gv = g.values();
        let p = self.reference.p;
        let mut out = vec![0.0; gv.len()];
        self.exec.fill(&mut out, |n| optimal_beta11(gv[n], xbar[n], s[n], p));
        Field2D::from_raw(*phi.grid(), out)
    }

    /// Penalty `-H(beta11)` at every node of step `k`.
    fn source(&self, beta11: &Field2D, k: usize) -> Vec<f64> {
        let xbar = self.reference.sigma_bar_sq.at(k).values();
        let s = self.reference.pole(k, self.hw.sigma_r);
        let s = s.values();
        let b = beta11.values();
        let p = self.reference.p;
        let mut out = vec![0.0; b.len()];
        self.exec.fill(&mut out, |n| -h(b[n], xbar[n], s[n], p));
        out
    }

    /// Policy evaluation: one implicit step from `phi_next` with the variance
    /// frozen at `beta11`.
    pub fn implicit_step(&self, phi_next: &Field2D, k: usize, beta11: &Field2D, closure: &Closure) -> Result<(Field2D, StepSystem)> {
        let coeffs = model_coeffs(self.grid(), &self.hw, self.time.t(k), beta11, &self.beta12(k), self.exec);
        let source = self.source(beta11, k);
        if let Some(n) = source.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical { node: n, what: format!("penalty is not finite at step {k}") });
        }
        implicit_step_with(
            &self.system,
            &coeffs,
            &source,
            phi_next,
            phi_next,
            closure,
            self.time.dt(),
            self.settings.linear_tol,
            self.exec,
        )
    }

    /// Policy iteration for one backward-Euler step `k`, starting from `phi_next`.
    pub fn policy_iteration_step_solve(&self, phi_next: &Field2D, k: usize, closure: &Closure) -> Result<PolicyStep> {
        self.policy_iteration(phi_next, phi_next, k, self.time.dt(), closure)
    }

    /// Policy iteration for `(I - dt L_b) phi + dt H(b) = base`, maximized
    /// over the pointwise policy `b`.
    pub fn policy_iteration(&self, base: &Field2D, guess: &Field2D, k: usize, dt: f64, closure: &Closure) -> Result<PolicyStep> {
        let mut guess = guess.clone();
        let mut changes = Vec::new();
        let t = self.time.t(k);
        let beta12 = self.beta12(k);
        for it in 1..=self.settings.max_policy_iterations {
            let beta = self.optimal_policy(&guess, k);
            let coeffs = model_coeffs(self.grid(), &self.hw, t, &beta, &beta12, self.exec);
            let source = self.source(&beta, k);
            if let Some(n) = source.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical { node: n, what: format!("penalty is not finite at step {k}") });
            }
            let (phi, system) =
                implicit_step_with(&self.system, &coeffs, &source, base, &guess, closure, dt, self.settings.linear_tol, self.exec)?;
            let change = phi.max_abs_diff(&guess);
            changes.push(change);
            if change <= self.settings.tol_policy {
                return Ok(PolicyStep { phi, beta11: beta, iterations: it, changes, system });
            }
            guess = phi;
        }
        Err(Error::PolicyIteration {
            node: k,
            iterations: self.settings.max_policy_iterations,
            change: changes.last().copied().unwrap_or(f64::NAN),
        })
    }

    /// Sup-norm over interior nodes of the discrete HJB residual
    /// `(base - phi)/dt + sup_b [L_b phi - H(b)]` at step `k`.
    pub fn discrete_residual(&self, base: &Field2D, phi: &Field2D, k: usize, dt: f64) -> f64 {
        let beta = self.optimal_policy(phi, k);
        let coeffs = model_coeffs(self.grid(), &self.hw, self.time.t(k), &beta, &self.beta12(k), self.exec);
        let lphi = crate::fd::apply_operator(self.grid(), &coeffs, phi.values(), crate::fd::Part::Full, self.exec);
        let source = self.source(&beta, k);
        (0..self.system.n())
            .map(|p| {
                let n = self.system.node(p);
                ((base.values()[n] - phi.values()[n]) / dt + lphi[n] + source[n]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Right-hand side and effective step of the time scheme, given the
    /// slice one step later and, when available, the one two steps later.
    pub fn scheme_base(&self, next: &Field2D, later: Option<&Field2D>) -> Result<(Field2D, f64)> {
        let dt = self.time.dt();
        match (self.settings.time_scheme, later) {
            (TimeScheme::Bdf2, Some(l)) => Ok((next.zip_map(l, |a, b| (4.0 * a - b) / 3.0)?, 2.0 * dt / 3.0)),
            _ => Ok((next.clone(), dt)),
        }
    }

    /// Backward sweep from the horizon to `t = 0`.
    pub fn solve(&self, lambda: &[f64], opts: SolveOptions) -> Result<HjbSolution> {
        if lambda.len() != self.jumps.len() {
            return invalid(format!("{} multipliers for {} instruments", lambda.len(), self.jumps.len()));
        }
        if let Some(i) = lambda.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite { what: "lambda", index: i });
        }
        let g = *self.grid();
        let n_steps = self.time.n_steps();
        let n_inst = self.jumps.len();
        let mut phi = Field2D::zeros(g);
        let mut later: Option<Field2D> = None;
        let mut closure = Closure::zero(&g);
        let mut kept = Vec::new();
        let mut betas = vec![Field2D::zeros(g); n_steps];
        let mut iterations = vec![0; n_steps];
        let mut non_monotone = 0;
        // sensitivities exist once the instrument has matured
        let mut psi: Vec<Option<Sensitivity>> = vec![None; n_inst];
        for k in (0..n_steps).rev() {
            let kn = k + 1;
            if self.time.is_maturity(kn) {
                phi = apply_jump(&phi, lambda, &self.jumps, kn)?;
                later = None;
                closure = Closure::from_slice(&phi);
                if opts.sensitivities {
                    for (i, j) in self.jumps.iter().enumerate() {
                        if j.node == kn {
                            let base = psi[i].take().map(|s| s.current).unwrap_or_else(|| Field2D::zeros(g));
                            let current = base.zip_map(&j.payoff, |a, b| a + b)?;
                            psi[i] = Some(Sensitivity { closure: Closure::zero(&g), current, later: None });
                        }
                        if let Some(s) = psi[i].as_mut() {
                            s.closure = Closure::from_slice(&s.current);
                            s.later = None;
                        }
                    }
                }
            }
            if opts.keep_phi {
                kept.push(phi.clone());
            }
            let (base, dt_eff) = self.scheme_base(&phi, later.as_ref())?;
            let step = self.policy_iteration(&base, &phi, k, dt_eff, &closure)?;
            if step.changes.windows(2).skip(1).any(|w| w[1] > w[0]) {
                non_monotone += 1;
                debug!("policy iteration at step {k} not monotone: {:?}", step.changes);
            }
            if opts.sensitivities {
                let tol = self.settings.linear_tol;
                let updated: Vec<Result<Option<Sensitivity>>> = self.exec.map(n_inst, |i| {
                    let Some(s) = &psi[i] else { return Ok(None) };
                    let (b, _) = self.scheme_base(&s.current, s.later.as_ref())?;
                    let next = step.system.solve_linear(&self.system, &b, &s.current, &s.closure, tol, Exec::Sequential)?;
                    Ok(Some(Sensitivity { closure: s.closure.clone(), later: Some(s.current.clone()), current: next }))
                });
                for (slot, u) in psi.iter_mut().zip(updated) {
                    *slot = u?;
                }
            }
            iterations[k] = step.iterations;
            betas[k] = step.beta11;
            later = Some(std::mem::replace(&mut phi, step.phi));
        }
        if non_monotone > 0 {
            warn!("policy iteration updates were not monotone on {non_monotone} of {n_steps} steps");
        }
        kept.push(phi);
        kept.reverse();
        let (z0, r0) = self.spot;
        let value_at_spot = kept[0].bilinear(z0, r0);
        let (sens, sens_fields) = if opts.sensitivities {
            let fields: Vec<Field2D> = psi
                .into_iter()
                .map(|p| p.map(|s| s.current).unwrap_or_else(|| Field2D::zeros(g)))
                .collect();
            (Some(fields.iter().map(|f| f.bilinear(z0, r0)).collect()), Some(fields))
        } else {
            (None, None)
        };
        Ok(HjbSolution {
            phi: kept,
            beta11: betas,
            value_at_spot,
            sensitivities: sens,
            sensitivity_fields: sens_fields,
            policy_iterations: iterations,
            non_monotone_steps: non_monotone,
        })
    }
}
