//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;
use std::time::Instant;

use log::debug;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the sup-norm of the gradient falls below this.
    pub tol_gradient: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self { memory: 10, max_iterations: 200, tol_gradient: 1e-4, c1: 1e-4, c2: 0.9, max_line_search: 30 }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub f: f64,
    pub grad_sup: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
    /// Curvature pairs `(s, y)` kept at exit, oldest first.
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f` from `x0`. `f` returns the value and the gradient.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], settings: &LbfgsSettings) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let start = Instant::now();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    check_finite(fx, &g)?;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut history = vec![IterationRecord { iteration: 0, f: fx, grad_sup: sup(&g), wall_ms: ms(start) }];
    let mut iterations = 0;
    let mut restarted = false;
    while sup(&g) >= settings.tol_gradient && iterations < settings.max_iterations {
        let mut d = direction(&g, &pairs);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let alpha0 = if pairs.is_empty() { (1.0 / sup(&d)).min(1.0) } else { 1.0 };
        let ls = line_search(&mut f, &x, fx, &d, slope, alpha0, settings);
        let (alpha, f_new, g_new, evals) = match ls {
            Ok(v) => v,
            Err(e) => {
                // one retry from steepest descent with fresh memory
                if restarted || pairs.is_empty() {
                    debug!("line search failed: {e}");
                    break;
                }
                restarted = true;
                pairs.clear();
                continue;
            }
        };
        restarted = false;
        evaluations += evals;
        let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        fx = f_new;
        g = g_new;
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == settings.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        iterations += 1;
        history.push(IterationRecord { iteration: iterations, f: fx, grad_sup: sup(&g), wall_ms: ms(start) });
        debug!("lbfgs iteration {iterations}: f = {fx:.12e}, |g| = {:.3e}", sup(&g));
    }
    Ok(LbfgsResult {
        converged: sup(&g) < settings.tol_gradient,
        x,
        f: fx,
        grad: g,
        iterations,
        evaluations,
        history,
        pairs: pairs.into_iter().map(|(s, y, _)| (s, y)).collect(),
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn check_finite(f: f64, g: &[f64]) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::NonFinite { what: "objective", index: 0 });
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", index: i });
    }
    Ok(())
}

/// Two-loop recursion: `-H g`.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

type Trial = (f64, f64, Vec<f64>);

/// Strong-Wolfe search along `d`; returns `(alpha, f, g, evaluations)`.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    d: &[f64],
    slope0: f64,
    alpha0: f64,
    st: &LbfgsSettings,
) -> Result<(f64, f64, Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evals = 0;
    let mut eval = |alpha: f64, evals: &mut usize| -> Result<Trial> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        *evals += 1;
        let (ft, gt) = f(&xt)?;
        if !ft.is_finite() || gt.iter().any(|v| !v.is_finite()) {
            return Ok((f64::INFINITY, f64::NAN, gt));
        }
        let s = dot(&gt, d);
        Ok((ft, s, gt))
    };
    let (mut a_prev, mut f_prev, mut s_prev) = (0.0, f0, slope0);
    let mut alpha = alpha0;
    for i in 0..st.max_line_search {
        let (ft, st_slope, gt) = eval(alpha, &mut evals)?;
        if !ft.is_finite() {
            // shrink into the finite region
            alpha = 0.5 * (a_prev + alpha);
            continue;
        }
        if ft > f0 + st.c1 * alpha * slope0 || (i > 0 && ft >= f_prev) {
            return zoom(&mut eval, &mut evals, f0, slope0, (a_prev, f_prev, s_prev), (alpha, ft, st_slope), st);
        }
        if st_slope.abs() <= -st.c2 * slope0 {
            return Ok((alpha, ft, gt, evals));
        }
        if st_slope >= 0.0 {
            return zoom(&mut eval, &mut evals, f0, slope0, (alpha, ft, st_slope), (a_prev, f_prev, s_prev), st);
        }
        a_prev = alpha;
        f_prev = ft;
        s_prev = st_slope;
        alpha *= 4.0;
    }
    Err(Error::LineSearch(format!("no acceptable step after {} trials", st.max_line_search)))
}

/// Zoom phase with cubic interpolation, safeguarded by bisection.
fn zoom<E>(
    eval: &mut E,
    evals: &mut usize,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    st: &LbfgsSettings,
) -> Result<(f64, f64, Vec<f64>, usize)>
where
    E: FnMut(f64, &mut usize) -> Result<Trial>,
{
    for _ in 0..st.max_line_search {
        let alpha = cubic_min(lo, hi);
        let (ft, s, gt) = eval(alpha, evals)?;
        if !ft.is_finite() || ft > f0 + st.c1 * alpha * slope0 || ft >= lo.1 {
            hi = (alpha, if ft.is_finite() { ft } else { f64::MAX }, s);
        } else {
            if s.abs() <= -st.c2 * slope0 {
                return Ok((alpha, ft, gt, *evals));
            }
            if s * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, ft, s);
        }
        if (hi.0 - lo.0).abs() <= 1e-14 * lo.0.abs().max(1e-300) {
            break;
        }
    }
    Err(Error::LineSearch("zoom did not find a strong-Wolfe point".into()))
}

/// Minimizer of the cubic through two points with slopes, kept inside the
/// middle 80% of the bracket.
fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let (x0, f0, g0) = a;
    let (x1, f1, g1) = b;
    let (lo, hi) = (x0.min(x1), x0.max(x1));
    let w = hi - lo;
    let mid = 0.5 * (lo + hi);
    if !(f1.is_finite() && g0.is_finite() && g1.is_finite()) || f1 == f64::MAX {
        return mid;
    }
    let d1 = g0 + g1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1 * d1 - g0 * g1;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let t = x1 - (x1 - x0) * (g1 + d2 - d1) / (g1 - g0 + 2.0 * d2);
    if t.is_finite() && t > lo + 0.1 * w && t < hi - 0.1 * w {
        t
    } else {
        mid
    }
}
