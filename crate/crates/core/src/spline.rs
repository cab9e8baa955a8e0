//! Natural and monotone cubic splines, and the tensorized surface smoother
//! built on them.

use crate::error::{invalid, Result};
use crate::grid::Field2D;
use crate::linalg::solve_tridiagonal;

/// Interpolating cubic spline with zero second derivative at both ends.
#[derive(Debug, Clone)]
pub struct NaturalCubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return invalid("a spline needs at least two knots and one value per knot");
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("spline knots must be strictly increasing");
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let (mut lo, mut di, mut up, mut rhs) = (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]);
            for q in 0..k {
                let i = q + 1;
                let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
                lo[q] = h0;
                di[q] = 2.0 * (h0 + h1);
                up[q] = h1;
                rhs[q] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            let mut scratch = vec![0.0; k];
            solve_tridiagonal(&lo, &di, &up, &mut rhs, &mut scratch);
            m[1..n - 1].copy_from_slice(&rhs);
        }
        Ok(Self { x: x.to_vec(), y: y.to_vec(), m })
    }

    /// Value at `t`; linear extrapolation outside the knots.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let (x, y, m) = (&self.x, &self.y, &self.m);
        if t <= x[0] || t >= x[n - 1] {
            let (a, b) = if t <= x[0] { (0, 1) } else { (n - 2, n - 1) };
            let h = x[b] - x[a];
            let slope = (y[b] - y[a]) / h - h * (2.0 * m[a] + m[b]) / 6.0;
            let end_slope = if t <= x[0] { slope } else { slope + h * (m[a] + m[b]) / 2.0 };
            let (x0, y0) = if t <= x[0] { (x[0], y[0]) } else { (x[n - 1], y[n - 1]) };
            return y0 + end_slope * (t - x0);
        }
        let i = match x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return y[i],
            Err(i) => i - 1,
        };
        let h = x[i + 1] - x[i];
        let a = (x[i + 1] - t) / h;
        let b = (t - x[i]) / h;
        a * y[i] + b * y[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0
    }
}

/// Piecewise cubic Hermite interpolant with Fritsch-Carlson slopes. It never
/// overshoots the knot values, so along a line its total variation equals
/// that of the knots.
#[derive(Debug, Clone)]
pub struct MonotoneCubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl MonotoneCubicSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return invalid("a spline needs at least two knots and one value per knot");
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("spline knots must be strictly increasing");
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![delta[0]; 2];
        } else {
            for i in 1..n - 1 {
                let (a, b) = (delta[i - 1], delta[i]);
                if a * b > 0.0 {
                    // weighted harmonic mean
                    let (w1, w2) = (2.0 * h[i] + h[i - 1], h[i] + 2.0 * h[i - 1]);
                    d[i] = (w1 + w2) / (w1 / a + w2 / b);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x: x.to_vec(), y: y.to_vec(), d })
    }

    /// Value at `t`; linear extrapolation outside the knots.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let (x, y, d) = (&self.x, &self.y, &self.d);
        if t <= x[0] {
            return y[0] + d[0] * (t - x[0]);
        }
        if t >= x[n - 1] {
            return y[n - 1] + d[n - 1] * (t - x[n - 1]);
        }
        let i = match x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return y[i],
            Err(i) => i - 1,
        };
        let h = x[i + 1] - x[i];
        let s = (t - x[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * y[i]
            + (s3 - 2.0 * s2 + s) * h * d[i]
            + (-2.0 * s3 + 3.0 * s2) * y[i + 1]
            + (s3 - s2) * h * d[i + 1]
    }
}

/// One-sided three-point end slope, limited so the end interval stays monotone.
fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d * del0 <= 0.0 {
        0.0
    } else if del0 * del1 <= 0.0 && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// Interpolant used between the knots of [`smooth_field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplineKind {
    Natural,
    #[default]
    Monotone,
}

enum Spline {
    Natural(NaturalCubicSpline),
    Monotone(MonotoneCubicSpline),
}

impl Spline {
    fn new(kind: SplineKind, x: &[f64], y: &[f64]) -> Result<Self> {
        Ok(match kind {
            SplineKind::Natural => Spline::Natural(NaturalCubicSpline::new(x, y)?),
            SplineKind::Monotone => Spline::Monotone(MonotoneCubicSpline::new(x, y)?),
        })
    }

    fn eval(&self, t: f64) -> f64 {
        match self {
            Spline::Natural(s) => s.eval(t),
            Spline::Monotone(s) => s.eval(t),
        }
    }
}

/// Knot indices `0, stride, 2 stride, ...` with the last node always included.
fn knots(n: usize, stride: usize) -> Vec<usize> {
    let mut k: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
    if *k.last().unwrap() != n - 1 {
        k.push(n - 1);
    }
    k
}

/// Smooths a field by spline interpolation through every `stride`-th node:
/// first along z on the knot columns, then along r on every row.
pub fn smooth_field(f: &Field2D, stride: usize, kind: SplineKind) -> Result<Field2D> {
    let g = *f.grid();
    let kz = knots(g.n_z, stride);
    let kr = knots(g.n_r, stride);
    let zs: Vec<f64> = kz.iter().map(|&i| g.z(i)).collect();
    let rs: Vec<f64> = kr.iter().map(|&j| g.r(j)).collect();
    // pass 1: z-splines on the knot columns
    let mut partial = vec![0.0; g.n_z * kr.len()];
    for (c, &j) in kr.iter().enumerate() {
        let ys: Vec<f64> = kz.iter().map(|&i| f.at(i, j)).collect();
        let s = Spline::new(kind, &zs, &ys)?;
        for i in 0..g.n_z {
            partial[i * kr.len() + c] = s.eval(g.z(i));
        }
    }
    // pass 2: r-splines on every z row
    let mut out = vec![0.0; g.len()];
    for i in 0..g.n_z {
        let s = Spline::new(kind, &rs, &partial[i * kr.len()..(i + 1) * kr.len()])?;
        for j in 0..g.n_r {
            out[g.idx(i, j)] = s.eval(g.r(j));
        }
    }
    Field2D::from_values(g, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialGrid2D;
    use proptest::prelude::*;

    #[test]
    fn reproduces_linear_data_exactly() {
        let x = [0.0, 0.5, 1.5, 2.0, 3.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let s = NaturalCubicSpline::new(&x, &y).unwrap();
        for t in [-1.0, 0.2, 1.0, 2.7, 3.5, 5.0] {
            assert!((s.eval(t) - (2.0 * t - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn approximates_smooth_functions() {
        let x: Vec<f64> = (0..21).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let s = NaturalCubicSpline::new(&x, &y).unwrap();
        // the natural end condition costs accuracy near x = 2, where sin'' is not 0
        for k in 0..=100 {
            let t = 0.5 + k as f64 * 0.01;
            assert!((s.eval(t) - t.sin()).abs() < 1e-5);
        }
        let m = MonotoneCubicSpline::new(&x, &y).unwrap();
        for k in 0..=200 {
            let t = k as f64 * 0.01;
            assert!((m.eval(t) - t.sin()).abs() < 1e-3);
        }
    }

    #[test]
    fn natural_end_conditions_known_case() {
        // three equally spaced knots: m1 = 3 (y0 - 2 y1 + y2) / (2 h^2)
        let s = NaturalCubicSpline::new(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((s.m[1] + 3.0).abs() < 1e-14);
        assert!((s.eval(0.5) - 0.6875).abs() < 1e-14);
    }

    #[test]
    fn smoothing_keeps_bilinear_fields() {
        let g = SpatialGrid2D::new(4.0, 5.0, 0.0, 5.0, 23, 17).unwrap();
        let f = Field2D::from_fn(g, |z, r| 1.0 + 0.3 * z - 0.2 * r + 0.05 * z * r);
        let s = smooth_field(&f, 4, SplineKind::Natural).unwrap();
        assert!(s.max_abs_diff(&f) < 1e-11);
    }

    #[test]
    fn smoothing_reduces_oscillation() {
        let g = SpatialGrid2D::new(4.0, 5.0, 0.0, 5.0, 41, 41).unwrap();
        let f = Field2D::from_fn(g, |z, r| 0.25 + 0.01 * ((z * 400.0).sin() + (r * 77.0).cos()));
        let s = smooth_field(&f, 4, SplineKind::Natural).unwrap();
        assert!(s.total_variation() < f.total_variation());
    }

    #[test]
    fn monotone_spline_keeps_monotone_data_monotone() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0, 0.0, 0.1, 5.0, 5.1, 5.1];
        let s = MonotoneCubicSpline::new(&x, &y).unwrap();
        let mut last = f64::NEG_INFINITY;
        for k in 0..=500 {
            let v = s.eval(k as f64 * 0.01);
            assert!(v >= last - 1e-14);
            last = v;
        }
        // the natural spline rings on the same data
        let n = NaturalCubicSpline::new(&x, &y).unwrap();
        assert!((0..=500).any(|k| n.eval(k as f64 * 0.01) < -1e-3));
    }

    #[test]
    fn monotone_spline_reproduces_lines() {
        let x = [0.0, 0.3, 1.0, 1.2, 2.5];
        let y: Vec<f64> = x.iter().map(|v| 4.0 - 1.5 * v).collect();
        let s = MonotoneCubicSpline::new(&x, &y).unwrap();
        for t in [-0.5, 0.1, 0.65, 1.1, 2.0, 3.0] {
            assert!((s.eval(t) - (4.0 - 1.5 * t)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn interpolates_knots(ys in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64 * 0.7 + (i * i) as f64 * 0.01).collect();
            let s = NaturalCubicSpline::new(&xs, &ys).unwrap();
            for (x, y) in xs.iter().zip(&ys) {
                prop_assert!((s.eval(*x) - y).abs() < 1e-10);
            }
        }

        #[test]
        fn monotone_spline_stays_inside_each_knot_interval(ys in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64 * 0.7 + (i * i) as f64 * 0.01).collect();
            let s = MonotoneCubicSpline::new(&xs, &ys).unwrap();
            let mut line_tv = 0.0;
            let mut prev = ys[0];
            for i in 0..xs.len() - 1 {
                let (lo, hi) = (ys[i].min(ys[i + 1]), ys[i].max(ys[i + 1]));
                for k in 0..=20 {
                    let v = s.eval(xs[i] + (xs[i + 1] - xs[i]) * k as f64 / 20.0);
                    prop_assert!(v >= lo - 1e-10 && v <= hi + 1e-10);
                    line_tv += (v - prev).abs();
                    prev = v;
                }
            }
            let knot_tv: f64 = ys.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
            prop_assert!((line_tv - knot_tv).abs() < 1e-9 * (1.0 + knot_tv));
        }
    }
}
