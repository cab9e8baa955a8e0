//! Uniform space-time discretization and fields on it.

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};

/// Uniform tensor grid over `[z_min, z_max] x [r_min, r_max]`, where `z` is
/// the log-price and `r` the rescaled short rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid2D {
    pub z_min: f64,
    pub z_max: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub n_z: usize,
    pub n_r: usize,
}

impl SpatialGrid2D {
    pub fn new(z_min: f64, z_max: f64, r_min: f64, r_max: f64, n_z: usize, n_r: usize) -> Result<Self> {
        if n_z < 3 || n_r < 3 {
            return invalid(format!("grid needs at least 3 nodes per axis, got {n_z}x{n_r}"));
        }
        if !(z_max > z_min) || !z_min.is_finite() || !z_max.is_finite() {
            return invalid(format!("grid z bounds must satisfy z_max > z_min, got [{z_min}, {z_max}]"));
        }
        if !(r_max > r_min) || !r_min.is_finite() || !r_max.is_finite() {
            return invalid(format!("grid r bounds must satisfy r_max > r_min, got [{r_min}, {r_max}]"));
        }
        Ok(Self { z_min, z_max, r_min, r_max, n_z, n_r })
    }

    #[inline]
    pub fn h_z(&self) -> f64 {
        (self.z_max - self.z_min) / (self.n_z - 1) as f64
    }

    #[inline]
    pub fn h_r(&self) -> f64 {
        (self.r_max - self.r_min) / (self.n_r - 1) as f64
    }

    #[inline]
    pub fn z(&self, i: usize) -> f64 {
        self.z_min + i as f64 * self.h_z()
    }

    #[inline]
    pub fn r(&self, j: usize) -> f64 {
        self.r_min + j as f64 * self.h_r()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_z * self.n_r
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear index, row-major by `z` then `r`.
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n_r + j
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.n_z || j + 1 == self.n_r
    }

    /// Same grid with a different resolution.
    pub fn with_size(&self, n_z: usize, n_r: usize) -> Result<Self> {
        Self::new(self.z_min, self.z_max, self.r_min, self.r_max, n_z, n_r)
    }
}

/// Uniform time grid `t_k = k * dt`, `k = 0..=n_steps`, with the nodes that
/// carry instrument maturities marked.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
    maturity_nodes: Vec<usize>,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return invalid(format!("time step must be positive, got {dt}"));
        }
        if n_steps == 0 {
            return invalid("time grid needs at least one step");
        }
        Ok(Self { dt, n_steps, maturity_nodes: Vec::new() })
    }

    /// Grid of `horizon_days * steps_per_day` steps of `1 / (year_days * steps_per_day)` years.
    pub fn daily(horizon_days: usize, steps_per_day: usize, year_days: f64) -> Result<Self> {
        if steps_per_day == 0 || !(year_days > 0.0) {
            return invalid("steps_per_day and year_days must be positive");
        }
        Self::new(1.0 / (year_days * steps_per_day as f64), horizon_days * steps_per_day)
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.t(self.n_steps)
    }

    /// Node index of time `t`; fails unless `t` coincides with a node.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt;
        let k = x.round();
        if !(t > 0.0) || (x - k).abs() > 1e-7 * x.max(1.0) || k as usize > self.n_steps {
            return Err(Error::OffGrid(t));
        }
        Ok(k as usize)
    }

    /// Marks `t` as a maturity node and returns its index.
    pub fn mark_maturity(&mut self, t: f64) -> Result<usize> {
        let k = self.node_of(t)?;
        if let Err(pos) = self.maturity_nodes.binary_search(&k) {
            self.maturity_nodes.insert(pos, k);
        }
        Ok(k)
    }

    /// Sorted distinct maturity nodes.
    pub fn maturity_nodes(&self) -> &[usize] {
        &self.maturity_nodes
    }

    pub fn is_maturity(&self, k: usize) -> bool {
        self.maturity_nodes.binary_search(&k).is_ok()
    }
}

/// A real value per node of a [`SpatialGrid2D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    grid: SpatialGrid2D,
    values: Vec<f64>,
}

impl Field2D {
    pub fn from_values(grid: SpatialGrid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            ));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "field", index });
        }
        Ok(Self { grid, values })
    }

    /// Unchecked constructor for solver internals that guarantee finiteness
    /// separately.
    pub(crate) fn from_raw(grid: SpatialGrid2D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn constant(grid: SpatialGrid2D, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    pub fn zeros(grid: SpatialGrid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f(z, r)` at every node.
    pub fn from_fn(grid: SpatialGrid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.n_z {
            let z = grid.z(i);
            for j in 0..grid.n_r {
                values.push(f(z, grid.r(j)));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &SpatialGrid2D {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { what, index }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Field2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { grid: self.grid, values })
    }

    pub fn same_grid(&self, other: &Field2D) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field2D) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bilinear interpolation, clamped to the grid hull.
    pub fn bilinear(&self, z: f64, r: f64) -> f64 {
        let g = &self.grid;
        let (i, wz) = locate(z, g.z_min, g.h_z(), g.n_z);
        let (j, wr) = locate(r, g.r_min, g.h_r(), g.n_r);
        let f00 = self.at(i, j);
        let f01 = self.at(i, j + 1);
        let f10 = self.at(i + 1, j);
        let f11 = self.at(i + 1, j + 1);
        (1.0 - wz) * ((1.0 - wr) * f00 + wr * f01) + wz * ((1.0 - wr) * f10 + wr * f11)
    }

    /// Sum of `|f(a) - f(b)|` over all grid edges.
    pub fn total_variation(&self) -> f64 {
        let g = &self.grid;
        let mut tv = 0.0;
        for i in 0..g.n_z {
            for j in 0..g.n_r {
                let v = self.at(i, j);
                if i + 1 < g.n_z {
                    tv += (self.at(i + 1, j) - v).abs();
                }
                if j + 1 < g.n_r {
                    tv += (self.at(i, j + 1) - v).abs();
                }
            }
        }
        tv
    }

    /// Writes `z,r,value` rows, row-major by z then r, 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["z", "r", "value"])?;
        for i in 0..self.grid.n_z {
            for j in 0..self.grid.n_r {
                out.write_record([
                    fmt17(self.grid.z(i)),
                    fmt17(self.grid.r(j)),
                    fmt17(self.at(i, j)),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a field written by [`Field2D::write_csv`] onto `grid`.
    pub fn read_csv<R: Read>(grid: SpatialGrid2D, r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut values = Vec::with_capacity(grid.len());
        for rec in rd.records() {
            let rec = rec?;
            let v: f64 = rec
                .get(2)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Config("malformed field row".into()))?;
            values.push(v);
        }
        Self::from_values(grid, values)
    }
}

/// Formats with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Cell index and fractional offset for linear interpolation, clamped.
#[inline]
pub(crate) fn locate(x: f64, x0: f64, h: f64, n: usize) -> (usize, f64) {
    let s = ((x - x0) / h).clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 2);
    (i, s - i as f64)
}

/// Spatial derivatives of a field.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub f_z: Field2D,
    pub f_r: Field2D,
    pub f_zz: Field2D,
    pub f_rr: Field2D,
    pub f_zr: Field2D,
}

/// First derivative along a strided line, second order everywhere.
fn d1_line(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let inv = 0.5 / h;
    out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) * inv;
    for k in 1..n - 1 {
        out[k] = (f[k + 1] - f[k - 1]) * inv;
    }
    out[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) * inv;
}

fn d2_line(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let inv = 1.0 / (h * h);
    for k in 1..n - 1 {
        out[k] = (f[k + 1] - 2.0 * f[k] + f[k - 1]) * inv;
    }
    if n >= 4 {
        out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) * inv;
        out[n - 1] = (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) * inv;
    } else {
        out[0] = out[1];
        out[n - 1] = out[n - 2];
    }
}

fn along_z(f: &Field2D, op: fn(&[f64], f64, &mut [f64])) -> Field2D {
    let g = *f.grid();
    let mut out = vec![0.0; g.len()];
    let mut line = vec![0.0; g.n_z];
    let mut res = vec![0.0; g.n_z];
    for j in 0..g.n_r {
        for i in 0..g.n_z {
            line[i] = f.at(i, j);
        }
        op(&line, g.h_z(), &mut res);
        for i in 0..g.n_z {
            out[g.idx(i, j)] = res[i];
        }
    }
    Field2D::from_raw(g, out)
}

fn along_r(f: &Field2D, op: fn(&[f64], f64, &mut [f64])) -> Field2D {
    let g = *f.grid();
    let mut out = vec![0.0; g.len()];
    for i in 0..g.n_z {
        let lo = g.idx(i, 0);
        op(&f.values()[lo..lo + g.n_r], g.h_r(), &mut out[lo..lo + g.n_r]);
    }
    Field2D::from_raw(g, out)
}

/// Central differences at interior nodes and one-sided second-order
/// stencils on the boundary. The mixed derivative composes the two
/// first-derivative operators.
pub fn central_diffs(f: &Field2D) -> Result<Derivatives> {
    f.check_finite("central_diffs input")?;
    let f_z = along_z(f, d1_line);
    let f_r = along_r(f, d1_line);
    let f_zz = along_z(f, d2_line);
    let f_rr = along_r(f, d2_line);
    let f_zr = along_z(&f_r, d1_line);
    Ok(Derivatives { f_z, f_r, f_zz, f_rr, f_zr })
}

/// `phi_zz - phi_z` at every node, the combination that drives the optimal
/// variance. Same stencils as [`central_diffs`].
pub(crate) fn zz_minus_z(f: &Field2D) -> Field2D {
    let g = *f.grid();
    let mut out = vec![0.0; g.len()];
    let mut line = vec![0.0; g.n_z];
    let mut d1 = vec![0.0; g.n_z];
    let mut d2 = vec![0.0; g.n_z];
    for j in 0..g.n_r {
        for i in 0..g.n_z {
            line[i] = f.at(i, j);
        }
        d1_line(&line, g.h_z(), &mut d1);
        d2_line(&line, g.h_z(), &mut d2);
        for i in 0..g.n_z {
            out[g.idx(i, j)] = d2[i] - d1[i];
        }
    }
    Field2D::from_raw(g, out)
}

/// Trapezoidal approximation of the double integral of `f * density`.
pub fn integrate_against(f: &Field2D, density: &Field2D) -> Result<f64> {
    f.same_grid(density)?;
    let g = f.grid();
    let mut acc = 0.0;
    for i in 0..g.n_z {
        let wz = if i == 0 || i + 1 == g.n_z { 0.5 } else { 1.0 };
        for j in 0..g.n_r {
            let wr = if j == 0 || j + 1 == g.n_r { 0.5 } else { 1.0 };
            acc += wz * wr * f.at(i, j) * density.at(i, j);
        }
    }
    Ok(acc * g.h_z() * g.h_r())
}
