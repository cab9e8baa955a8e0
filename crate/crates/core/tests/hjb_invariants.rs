mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;

use otcal_core::calib::{vega_scale, DualObjective};
use otcal_core::fd::Closure;
use otcal_core::grid::Field2D;
use otcal_core::hjb::{apply_jump, JumpTerm, SolveOptions};
use otcal_core::pricing::{ModelSurfaces, Pricer};

use common::{priced, small_config, with_calls};

fn objective(n: usize) -> (otcal_core::config::Problem, DualObjective) {
    let p = priced(with_calls(small_config(n), &[(30, 92.0), (30, 104.0), (60, 88.0), (60, 99.0)]));
    let v = vega_scale(&p).unwrap();
    let o = DualObjective::new(&p, p.reference.clone(), &v).unwrap();
    (p, o)
}

#[test]
fn zero_multipliers_keep_the_reference() {
    let (p, o) = objective(12);
    let sol = o.solver.solve(&[0.0; 4], SolveOptions { keep_phi: true, sensitivities: false }).unwrap();
    assert_eq!(sol.phi.len(), p.time.n_steps() + 1);
    assert!(sol.phi.iter().all(|f| f.max_abs() <= 1e-12));
    for (k, b) in sol.beta11.iter().enumerate() {
        assert!(b.max_abs_diff(p.reference.sigma_bar_sq.at(k)) <= 1e-12);
    }
}

#[test]
fn jump_is_linear_in_the_multipliers() {
    let g = otcal_core::grid::SpatialGrid2D::new(4.0, 5.0, 0.0, 5.0, 6, 5).unwrap();
    let jumps = vec![
        JumpTerm { node: 3, payoff: Field2D::from_fn(g, |z, _| z) },
        JumpTerm { node: 3, payoff: Field2D::from_fn(g, |_, r| r * r) },
        JumpTerm { node: 7, payoff: Field2D::constant(g, 1.0) },
    ];
    let phi = Field2D::from_fn(g, |z, r| (z - r).sin());
    let a = apply_jump(&phi, &[1.0, 0.0, 5.0], &jumps, 3).unwrap();
    let b = apply_jump(&phi, &[0.0, 2.0, 5.0], &jumps, 3).unwrap();
    let ab = apply_jump(&phi, &[1.0, 2.0, 5.0], &jumps, 3).unwrap();
    let sum = a.zip_map(&b, |x, y| x + y).unwrap().zip_map(&phi, |s, f| s - f).unwrap();
    assert!(ab.max_abs_diff(&sum) < 1e-14);
    // nothing matures at other nodes
    assert_eq!(apply_jump(&phi, &[1.0, 2.0, 0.0], &jumps, 4).unwrap(), phi);
    assert!(apply_jump(&phi, &[1.0], &jumps, 3).is_err());
}

#[test]
fn one_step_satisfies_the_discrete_equation() {
    let (p, o) = objective(16);
    let phi_next = Field2D::from_fn(p.grid, |z, r| 0.3 * (z - 4.5).powi(2) - 0.05 * r + 0.2 * (3.0 * z).sin());
    let closure = Closure::from_slice(&phi_next);
    let k = 20;
    let step = o.solver.policy_iteration_step_solve(&phi_next, k, &closure).unwrap();
    assert!(step.iterations >= 1);
    let res = o.solver.discrete_residual(&phi_next, &step.phi, k, p.time.dt());
    // policy stops at a small change in phi, amplified by 1/dt
    let bound = 10.0 * p.settings.tol_policy / p.time.dt();
    assert!(res <= bound, "residual {res} above {bound}");
    // the policy-iteration changes decrease
    assert!(step.changes.windows(2).all(|w| w[1] <= w[0] * 1.0001));
}

/// For small multipliers the value is the reference price of the weighted
/// payoffs to first order.
#[test]
fn small_multipliers_match_reference_prices() {
    let (p, o) = objective(16);
    let surfaces = ModelSurfaces::reference(&p.reference, p.hw.sigma_r);
    let pricer = Pricer::for_problem(&p).unwrap();
    let lambda = [0.4, -0.2, 0.3, 0.1];
    let mut linear = 0.0;
    for (i, j) in o.solver.jumps.iter().enumerate() {
        linear += lambda[i] * pricer.implicit_price(&surfaces, &j.payoff, j.node).unwrap().price;
    }
    let eps = 1e-4;
    let small: Vec<f64> = lambda.iter().map(|l| l * eps).collect();
    let sol = o.solver.solve(&small, SolveOptions::default()).unwrap();
    assert_relative_eq!(sol.value_at_spot / eps, linear, max_relative = 1e-3);
}

#[test]
fn gradient_matches_finite_differences() {
    let (_, o) = objective(14);
    let lambda = [3.0, -2.0, 1.5, 4.0];
    let e = o.evaluate(&lambda).unwrap();
    let h = 1e-4;
    for i in 0..4 {
        let (mut up, mut dn) = (lambda, lambda);
        up[i] += h;
        dn[i] -= h;
        let fd = (o.value(&up).unwrap() - o.value(&dn).unwrap()) / (2.0 * h);
        assert_relative_eq!(fd, e.grad[i], max_relative = 1e-5, epsilon = 1e-9);
    }
    let model = e.solution.sensitivities.as_ref().unwrap();
    // dual identity: L = lambda . u - phi(0)
    let l = lambda.iter().zip(&o.scaled_prices).map(|(a, u)| a * u).sum::<f64>() - e.solution.value_at_spot;
    assert_relative_eq!(l, e.l, max_relative = 1e-14);
    // call sensitivities are positive prices
    assert!(model.iter().all(|&m| m > 0.0));
}

#[test]
fn solver_rejects_bad_multipliers() {
    let (_, o) = objective(10);
    assert!(o.solver.solve(&[0.0; 3], SolveOptions::default()).is_err());
    assert!(o.solver.solve(&[0.0, f64::NAN, 0.0, 0.0], SolveOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    /// The dual objective is concave along any segment.
    #[test]
    fn dual_objective_is_concave(a in prop::array::uniform4(-5.0f64..5.0), b in prop::array::uniform4(-5.0f64..5.0)) {
        let (_, o) = objective(10);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let (la, lb, lm) = (o.value(&a).unwrap(), o.value(&b).unwrap(), o.value(&mid).unwrap());
        prop_assert!(lm >= 0.5 * (la + lb) - 1e-9 * (1.0 + la.abs() + lb.abs()));
    }

    /// Raising one multiplier on a call payoff raises the value function.
    #[test]
    fn value_is_monotone_in_multipliers(i in 0usize..4, d in 0.1f64..3.0) {
        let (_, o) = objective(10);
        let base = [1.0, -1.0, 0.5, 2.0];
        let mut up = base;
        up[i] += d;
        let v0 = o.solver.solve(&base, SolveOptions::default()).unwrap().value_at_spot;
        let v1 = o.solver.solve(&up, SolveOptions::default()).unwrap().value_at_spot;
        prop_assert!(v1 > v0);
    }
}

#[test]
fn doubling_payoffs_halves_multipliers() {
    let (p, o) = objective(12);
    let lambda = [2.0, -1.0, 0.5, 3.0];
    let mut doubled = DualObjective::new(&p, p.reference.clone(), &vega_scale(&p).unwrap()).unwrap();
    for j in &mut doubled.solver.jumps {
        j.payoff = j.payoff.map(|g| 2.0 * g);
    }
    let half: Vec<f64> = lambda.iter().map(|l| 0.5 * l).collect();
    let a = o.solver.solve(&lambda, SolveOptions::default()).unwrap().value_at_spot;
    let b = doubled.solver.solve(&half, SolveOptions::default()).unwrap().value_at_spot;
    assert_relative_eq!(a, b, max_relative = 1e-12);
}

/// The zero solution does not depend on the reference level.
#[test]
fn zero_multipliers_with_a_perturbed_reference() {
    let (p, _) = objective(12);
    let mut reference = p.reference.clone();
    reference.sigma_bar_sq = reference.sigma_bar_sq.map(|f| f.map(|v| v * 1.3));
    let o = DualObjective::new(&p, reference, &vega_scale(&p).unwrap()).unwrap();
    let sol = o.solver.solve(&[0.0; 4], SolveOptions { keep_phi: true, sensitivities: false }).unwrap();
    assert!(sol.phi.iter().all(|f| f.max_abs() <= 1e-12));
}

#[test]
fn value_converges_under_refinement() {
    let lambda = [0.3, -0.2, 0.25, 0.1];
    let values: Vec<f64> = [12, 24, 48]
        .iter()
        .map(|&n| objective(n).1.solver.solve(&lambda, SolveOptions::default()).unwrap().value_at_spot)
        .collect();
    let (d1, d2) = ((values[1] - values[0]).abs(), (values[2] - values[1]).abs());
    assert!(d2 < 0.5 * d1, "{values:?}");
}
