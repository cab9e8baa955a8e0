//! Monte Carlo validation: Euler paths of the stock/rate model, discounted
//! prices, discounted densities and the weak-form Fokker-Planck check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Problem;
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::fd::NodeCoeffs;
use crate::grid::{locate, Field2D, SpatialGrid2D};
use crate::market::{GeneratingModel, HullWhiteParams};
use crate::pricing::ModelSurfaces;

const BLOCK: usize = 1024;

/// Diffusion driving the simulated paths.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    /// CEV stock correlated with the rate, evaluated exactly off the grid.
    Generating(&'a GeneratingModel),
    /// Variance and covariance surfaces, interpolated bilinearly and held
    /// flat outside the grid.
    Surfaces(&'a ModelSurfaces),
}

impl Dynamics<'_> {
    /// `(beta11, beta12)` at time node `k` and state `(z, r)`, unscaled rate.
    #[inline]
    fn beta(&self, k: usize, z: f64, r: f64, hw: &HullWhiteParams) -> (f64, f64) {
        match self {
            Dynamics::Generating(m) => {
                let v = m.local_variance(z);
                (v, m.correlation * v.sqrt() * hw.sigma_r)
            }
            Dynamics::Surfaces(s) => {
                let rt = r * hw.rate_scale;
                (s.beta11.at(k).bilinear(z, rt), s.beta12.at(k).bilinear(z, rt))
            }
        }
    }
}

/// Path count, seed and time refinement of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McSettings {
    pub paths: usize,
    pub seed: u64,
    /// Euler steps per step of the time grid.
    pub substeps: usize,
}

impl McSettings {
    pub fn from_problem(problem: &Problem) -> Self {
        let s = &problem.simulation;
        Self { paths: s.paths, seed: s.seed, substeps: s.substeps }
    }
}

/// States `(z, r, discount)` of every path at the recorded time nodes.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub nodes: Vec<usize>,
    pub n_paths: usize,
    /// Indexed `[record][path]`; `r` is the unscaled rate.
    pub z: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub discount: Vec<Vec<f64>>,
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_samples(n: usize, f: impl Fn(usize) -> f64) -> Self {
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let v = f(i);
            s += v;
            s2 += v * v;
        }
        let nf = n as f64;
        let mean = s / nf;
        let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
        Self { mean, std_err: (var / nf).sqrt() }
    }

    /// Whether `x` lies within `k` standard errors.
    pub fn contains(&self, x: f64, k: f64) -> bool {
        (x - self.mean).abs() <= k * self.std_err
    }
}

impl PathBatch {
    pub fn record(&self, node: usize) -> Result<usize> {
        match self.nodes.iter().position(|&n| n == node) {
            Some(i) => Ok(i),
            None => invalid(format!("time node {node} was not recorded")),
        }
    }

    /// Discounted expectation `E[exp(-int r) f(z_T, r_tilde_T)]` at `node`.
    pub fn mc_price(&self, node: usize, rate_scale: f64, payoff: impl Fn(f64, f64) -> f64) -> Result<McEstimate> {
        let i = self.record(node)?;
        let (z, r, w) = (&self.z[i], &self.r[i], &self.discount[i]);
        Ok(McEstimate::from_samples(self.n_paths, |p| w[p] * payoff(z[p], r[p] * rate_scale)))
    }

    /// Fraction of paths outside the grid at `node`.
    pub fn outside_fraction(&self, node: usize, grid: &SpatialGrid2D, rate_scale: f64) -> Result<f64> {
        let i = self.record(node)?;
        let out = (0..self.n_paths)
            .filter(|&p| {
                let (z, r) = (self.z[i][p], self.r[i][p] * rate_scale);
                z < grid.z_min || z > grid.z_max || r < grid.r_min || r > grid.r_max
            })
            .count();
        Ok(out as f64 / self.n_paths as f64)
    }
}

/// Euler-Maruyama paths from `(z0, r0)` recording the states at `nodes`.
/// Each block of paths owns a ChaCha stream, so results do not depend on
/// the execution mode.
pub fn euler_simulate(problem: &Problem, dynamics: Dynamics<'_>, nodes: &[usize], settings: McSettings) -> Result<PathBatch> {
    if settings.paths < 2 || settings.substeps == 0 {
        return invalid("simulation needs at least two paths and one substep");
    }
    let n_steps = problem.time.n_steps();
    if let Some(&n) = nodes.iter().find(|&&n| n > n_steps) {
        return invalid(format!("record node {n} beyond the horizon"));
    }
    let last = nodes.iter().copied().max().unwrap_or(0);
    let hw = &problem.hw;
    let dt = problem.time.dt() / settings.substeps as f64;
    let sq = dt.sqrt();
    let n_blocks = settings.paths.div_ceil(BLOCK);
    let (z0, r0) = (problem.spot_z(), hw.r0);
    let blocks = problem.exec.map(n_blocks, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(b as u64);
        let m = BLOCK.min(settings.paths - b * BLOCK);
        let mut z = vec![z0; m];
        let mut r = vec![r0; m];
        let mut int_r = vec![0.0; m];
        let mut rec = vec![(Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m)); nodes.len()];
        let store = |k: usize, rec: &mut Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>, z: &[f64], r: &[f64], ir: &[f64]| {
            for (slot, _) in nodes.iter().enumerate().filter(|(_, &n)| n == k) {
                rec[slot].0.extend_from_slice(z);
                rec[slot].1.extend_from_slice(r);
                rec[slot].2.extend(ir.iter().map(|v| (-v).exp()));
            }
        };
        store(0, &mut rec, &z, &r, &int_r);
        for k in 0..last {
            for sub in 0..settings.substeps {
                let t = problem.time.t(k) + sub as f64 * dt;
                let b_t = hw.b(t);
                for p in 0..m {
                    let e1: f64 = rng.sample(StandardNormal);
                    let e2: f64 = rng.sample(StandardNormal);
                    let (b11, b12) = dynamics.beta(k, z[p], r[p], hw);
                    let vol = b11.max(0.0).sqrt();
                    let rho = if vol > 0.0 { (b12 / (vol * hw.sigma_r)).clamp(-1.0, 1.0) } else { 0.0 };
                    let w_r = e2;
                    let w_z = rho * e2 + (1.0 - rho * rho).sqrt() * e1;
                    let r_old = r[p];
                    z[p] += (r_old - 0.5 * b11) * dt + vol * sq * w_z;
                    r[p] += (b_t - hw.a * r_old) * dt + hw.sigma_r * sq * w_r;
                    int_r[p] += 0.5 * (r_old + r[p]) * dt;
                }
            }
            store(k + 1, &mut rec, &z, &r, &int_r);
        }
        rec
    });
    let mut zs = vec![Vec::with_capacity(settings.paths); nodes.len()];
    let mut rs = zs.clone();
    let mut ws = zs.clone();
    for block in blocks {
        for (i, (z, r, w)) in block.into_iter().enumerate() {
            zs[i].extend(z);
            rs[i].extend(r);
            ws[i].extend(w);
        }
    }
    Ok(PathBatch { nodes: nodes.to_vec(), n_paths: settings.paths, z: zs, r: rs, discount: ws })
}

/// Discounted density on the grid by cloud-in-cell deposit; paths outside
/// the grid are dropped.
pub fn discounted_density(batch: &PathBatch, node: usize, grid: &SpatialGrid2D, rate_scale: f64) -> Result<Field2D> {
    let i = batch.record(node)?;
    let mut mass = vec![0.0; grid.len()];
    let cell = grid.h_z() * grid.h_r();
    for p in 0..batch.n_paths {
        let (z, r) = (batch.z[i][p], batch.r[i][p] * rate_scale);
        if z < grid.z_min || z > grid.z_max || r < grid.r_min || r > grid.r_max {
            continue;
        }
        let (a, wz) = locate(z, grid.z_min, grid.h_z(), grid.n_z);
        let (b, wr) = locate(r, grid.r_min, grid.h_r(), grid.n_r);
        let w = batch.discount[i][p] / batch.n_paths as f64 / cell;
        mass[grid.idx(a, b)] += w * (1.0 - wz) * (1.0 - wr);
        mass[grid.idx(a + 1, b)] += w * wz * (1.0 - wr);
        mass[grid.idx(a, b + 1)] += w * (1.0 - wz) * wr;
        mass[grid.idx(a + 1, b + 1)] += w * wz * wr;
    }
    // boundary cells only receive half (edges) or a quarter (corners) of a cell
    for a in 0..grid.n_z {
        for b in 0..grid.n_r {
            let mut f = 1.0;
            if a == 0 || a + 1 == grid.n_z {
                f *= 2.0;
            }
            if b == 0 || b + 1 == grid.n_r {
                f *= 2.0;
            }
            mass[grid.idx(a, b)] *= f;
        }
    }
    Field2D::from_values(*grid, mass)
}

/// Smooth test function of `(z, r_tilde)` with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// `exp(-((z-z0)^2/(2 sz^2) + (r-r0)^2/(2 sr^2)))`.
    Gaussian { z0: f64, r0: f64, sz: f64, sr: f64 },
    Constant(f64),
}

/// Value, gradient and Hessian `(f, f_z, f_r, f_zz, f_zr, f_rr)`.
pub type Jet = (f64, f64, f64, f64, f64, f64);

impl TestFunction {
    pub fn jet(&self, z: f64, r: f64) -> Jet {
        match *self {
            TestFunction::Constant(c) => (c, 0.0, 0.0, 0.0, 0.0, 0.0),
            TestFunction::Gaussian { z0, r0, sz, sr } => {
                let (u, v) = ((z - z0) / (sz * sz), (r - r0) / (sr * sr));
                let f = (-0.5 * ((z - z0) * u + (r - r0) * v)).exp();
                (f, -u * f, -v * f, (u * u - 1.0 / (sz * sz)) * f, u * v * f, (v * v - 1.0 / (sr * sr)) * f)
            }
        }
    }

    /// Generator with killing, `alpha . grad f + beta : hess f / 2 - r f`, in
    /// scaled coordinates.
    pub fn generator(&self, c: &NodeCoeffs, z: f64, r: f64) -> f64 {
        let (f, fz, fr, fzz, fzr, frr) = self.jet(z, r);
        c.mu_z * fz + c.mu_r * fr + c.d_zz * fzz + c.d_zr * fzr + c.d_rr * frr - c.c * f
    }
}

/// Weak-form discounted Fokker-Planck residual at one time node.
#[derive(Debug, Clone, PartialEq)]
pub struct FpResidual {
    pub node: usize,
    pub function: usize,
    /// `d/dt <f, rho>` by central differences.
    pub lhs: f64,
    /// `<A f, rho>`.
    pub rhs: f64,
    pub residual: f64,
    pub std_err: f64,
    /// Central-difference bias estimated by Richardson against the doubled step.
    pub fd_bias: f64,
}

impl FpResidual {
    /// Three standard errors plus the difference bias.
    pub fn error_bar(&self) -> f64 {
        3.0 * self.std_err + self.fd_bias
    }

    pub fn within_bar(&self) -> bool {
        self.residual.abs() <= self.error_bar()
    }
}

/// Nodes needed by [`discounted_fp_residual`] for the checks at `nodes`.
pub fn fp_record_nodes(nodes: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = nodes.iter().flat_map(|&n| [n - 2, n - 1, n, n + 1, n + 2]).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Compares `d/dt E[D_t f(X_t)]` with `E[D_t (A f)(X_t)]` path by path. The
/// batch must hold [`fp_record_nodes`] of `nodes`.
pub fn discounted_fp_residual(
    problem: &Problem,
    batch: &PathBatch,
    dynamics: Dynamics<'_>,
    functions: &[TestFunction],
    nodes: &[usize],
) -> Result<Vec<FpResidual>> {
    let hw = &problem.hw;
    let dt = problem.time.dt();
    let rs = hw.rate_scale;
    let mut out = Vec::new();
    for &node in nodes {
        if node < 2 {
            return invalid("Fokker-Planck check needs two recorded steps before each node");
        }
        let idx = |n: usize| batch.record(n);
        let (im2, im1, i0, ip1, ip2) = (idx(node - 2)?, idx(node - 1)?, idx(node)?, idx(node + 1)?, idx(node + 2)?);
        let b_t = hw.b(problem.time.t(node));
        for (fi, f) in functions.iter().enumerate() {
            let val = |rec: usize, p: usize| batch.discount[rec][p] * f.jet(batch.z[rec][p], batch.r[rec][p] * rs).0;
            let gen = |p: usize| {
                let (z, r) = (batch.z[i0][p], batch.r[i0][p]);
                let (b11, b12) = dynamics.beta(node, z, r, hw);
                let c = NodeCoeffs::model(hw, b_t, r * rs, b11, b12);
                batch.discount[i0][p] * f.generator(&c, z, r * rs)
            };
            let n = batch.n_paths;
            let stat = McEstimate::from_samples(n, |p| (val(ip1, p) - val(im1, p)) / (2.0 * dt) - gen(p));
            let d1 = McEstimate::from_samples(n, |p| (val(ip1, p) - val(im1, p)) / (2.0 * dt));
            let d2 = McEstimate::from_samples(n, |p| (val(ip2, p) - val(im2, p)) / (4.0 * dt));
            let rhs = McEstimate::from_samples(n, gen);
            out.push(FpResidual {
                node,
                function: fi,
                lhs: d1.mean,
                rhs: rhs.mean,
                residual: stat.mean,
                std_err: stat.std_err,
                fd_bias: (d2.mean - d1.mean).abs() / 3.0,
            });
        }
    }
    Ok(out)
}

/// A handful of full paths for plotting: `(path, node, z, r)` rows.
pub fn sample_paths(problem: &Problem, dynamics: Dynamics<'_>, n_paths: usize, seed: u64) -> Result<Vec<(usize, usize, f64, f64)>> {
    let nodes: Vec<usize> = (0..=problem.time.n_steps()).collect();
    let settings = McSettings { paths: n_paths.max(2), seed, substeps: problem.simulation.substeps };
    let batch = euler_simulate(&Problem { exec: Exec::Sequential, ..problem.clone() }, dynamics, &nodes, settings)?;
    let mut rows = Vec::new();
    for p in 0..n_paths {
        for (i, &k) in nodes.iter().enumerate() {
            rows.push((p, k, batch.z[i][p], batch.r[i][p]));
        }
    }
    Ok(rows)
}
