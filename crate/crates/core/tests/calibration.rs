mod common;

use otcal_core::calib::{calibrate, smooth_and_recalibrate, CalibrationReport};
use otcal_core::config::{Config, StandardReference};
use otcal_core::grid::Field2D;
use otcal_core::pricing::{ModelSurfaces, Pricer};

use common::{priced, small_config, with_calls};

const CALLS: [(u32, f64); 4] = [(60, 92.0), (60, 106.0), (120, 92.0), (120, 113.0)];

#[test]
fn standard_calibration_converges_on_a_coarse_grid() {
    let p = priced(with_calls(small_config(20), &CALLS));
    let r = calibrate(&p, p.reference.clone(), None).unwrap();
    assert!(r.converged(), "|grad| {}", r.state.grad_sup());
    assert!(r.state.grad_sup() < 1e-4);
    assert_eq!(r.beta11.len(), p.time.n_steps());
    let rep = CalibrationReport::build(&p, &r).unwrap();
    for row in &rep.rows {
        assert!((row.model_iv - row.market_iv).abs() < 2e-3, "{row:?}");
    }
    // the trace ends at the reported state
    let last = r.trace.last().unwrap();
    assert!((last.grad_sup - r.state.grad_sup()).abs() < 1e-15);
    // and the objective only rises along it
    assert!(r.trace.windows(2).all(|w| w[1].l >= w[0].l - 1e-12));
}

#[test]
fn market_from_the_reference_needs_no_correction() {
    let p = with_calls(small_config(16), &CALLS).to_problem().unwrap();
    let surfaces = ModelSurfaces::reference(&p.reference, p.hw.sigma_r);
    let pricer = Pricer::for_problem(&p).unwrap();
    let eps = p.generating.payoff_smoothing;
    let mut cfg = with_calls(small_config(16), &CALLS);
    for (i, ic) in cfg.instruments.iter_mut().enumerate() {
        let inst = &p.instruments[i];
        let payoff = Field2D::from_fn(p.grid, |z, _| inst.smoothed_payoff(z, eps));
        ic.price = Some(pricer.implicit_price(&surfaces, &payoff, p.maturity_node(i)).unwrap().price);
    }
    let p = cfg.to_problem().unwrap();
    let r = calibrate(&p, p.reference.clone(), None).unwrap();
    assert!(r.converged());
    assert!(r.state.iterations <= 1, "{} iterations", r.state.iterations);
    assert!(r.state.lambda.iter().all(|l| l.abs() < 1e-4), "{:?}", r.state.lambda);
}

#[test]
fn both_references_fit_the_same_market() {
    for which in [StandardReference::Good, StandardReference::Bad] {
        let p = priced(with_calls(Config::standard(which).with_grid(16, 16), &CALLS));
        let r = calibrate(&p, p.reference.clone(), None).unwrap();
        assert!(r.converged(), "{which:?}: |grad| {}", r.state.grad_sup());
        assert!(r.state.lambda.iter().any(|l| l.abs() > 1e-3));
    }
}

#[test]
fn smoothing_epochs_keep_the_fit() {
    let p = priced(with_calls(small_config(16), &CALLS));
    let first = calibrate(&p, p.reference.clone(), None).unwrap();
    let r = smooth_and_recalibrate(&p, first, 2).unwrap();
    assert_eq!(r.epochs.len(), 3);
    assert!(r.converged());
    assert!(r.epochs.iter().all(|e| e.total_variation.is_finite() && e.total_variation > 0.0));
    assert!(r.trace.iter().any(|t| t.epoch == 2));
}

#[test]
fn calibration_needs_instruments_with_prices() {
    let mut cfg = small_config(12);
    cfg.instruments.clear();
    let p = cfg.to_problem().unwrap();
    assert!(calibrate(&p, p.reference.clone(), None).is_err());
}
