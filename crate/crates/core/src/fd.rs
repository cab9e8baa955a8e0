//! Finite-difference machinery shared by the HJB and pricing solvers.
//!
//! Both solvers discretize operators of the form
//!
//! ```text
//! L phi = mu_z phi_z + mu_r phi_r + d_zz phi_zz + d_zr phi_zr + d_rr phi_rr - c phi
//! ```
//!
//! with central differences at interior nodes. Boundary nodes carry no
//! equation of their own: their values are extrapolated from the interior
//! so that the outward second derivative equals a value frozen at the last
//! maturity slice (see [`Closure`]). Eliminating them leaves a 9-point
//! system on the interior nodes.

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::grid::{Field2D, SpatialGrid2D};
use crate::linalg::CsrMatrix;
use crate::market::HullWhiteParams;

/// Operator coefficients at one node.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeCoeffs {
    pub mu_z: f64,
    pub mu_r: f64,
    pub d_zz: f64,
    pub d_zr: f64,
    pub d_rr: f64,
    pub c: f64,
}

impl NodeCoeffs {
    /// Generator of the stock/rate model in rescaled-rate coordinates,
    /// discounting at `r = r_tilde / R`.
    #[inline]
    pub fn model(hw: &HullWhiteParams, b_t: f64, r_tilde: f64, beta11: f64, beta12: f64) -> Self {
        let rs = hw.rate_scale;
        let r = r_tilde / rs;
        Self {
            mu_z: r - 0.5 * beta11,
            mu_r: rs * b_t - hw.a * r_tilde,
            d_zz: 0.5 * beta11,
            d_zr: rs * beta12,
            d_rr: 0.5 * rs * rs * hw.sigma_r * hw.sigma_r,
            c: r,
        }
    }
}

/// Which part of the operator a stencil covers (ADI splitting).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Full,
    /// Mixed derivative and discounting.
    Explicit,
    /// Convection-diffusion along z.
    Z,
    /// Convection-diffusion along r.
    R,
}

/// 3x3 stencil weights indexed `[di + 1][dj + 1]`.
pub type Stencil = [[f64; 3]; 3];

#[inline]
pub fn stencil(c: &NodeCoeffs, hz: f64, hr: f64, part: Part) -> Stencil {
    let mut w = [[0.0; 3]; 3];
    if matches!(part, Part::Full | Part::Z) {
        let a = c.d_zz / (hz * hz);
        let b = c.mu_z / (2.0 * hz);
        w[0][1] += a - b;
        w[2][1] += a + b;
        w[1][1] -= 2.0 * a;
    }
    if matches!(part, Part::Full | Part::R) {
        let a = c.d_rr / (hr * hr);
        let b = c.mu_r / (2.0 * hr);
        w[1][0] += a - b;
        w[1][2] += a + b;
        w[1][1] -= 2.0 * a;
    }
    if matches!(part, Part::Full | Part::Explicit) {
        let q = c.d_zr / (4.0 * hz * hr);
        w[2][2] += q;
        w[0][0] += q;
        w[2][0] -= q;
        w[0][2] -= q;
        w[1][1] -= c.c;
    }
    w
}

/// Frozen outward second derivatives on the four faces.
///
/// `zz_lo[j]`/`zz_hi[j]` hold `phi_zz` on the faces `z = z_min`/`z_max` for
/// every `j` (corners included); `rr_lo[i]`/`rr_hi[i]` hold `phi_rr` on the
/// faces `r = r_min`/`r_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Closure {
    pub zz_lo: Vec<f64>,
    pub zz_hi: Vec<f64>,
    pub rr_lo: Vec<f64>,
    pub rr_hi: Vec<f64>,
}

impl Closure {
    pub fn zero(grid: &SpatialGrid2D) -> Self {
        Self {
            zz_lo: vec![0.0; grid.n_r],
            zz_hi: vec![0.0; grid.n_r],
            rr_lo: vec![0.0; grid.n_z],
            rr_hi: vec![0.0; grid.n_z],
        }
    }

    /// Reads the boundary second differences of a slice.
    pub fn from_slice(f: &Field2D) -> Self {
        let g = f.grid();
        let (nz, nr) = (g.n_z, g.n_r);
        let (iz, ir) = (1.0 / (g.h_z() * g.h_z()), 1.0 / (g.h_r() * g.h_r()));
        let d2 = |a: f64, b: f64, c: f64| a - 2.0 * b + c;
        Self {
            zz_lo: (0..nr).map(|j| d2(f.at(0, j), f.at(1, j), f.at(2, j)) * iz).collect(),
            zz_hi: (0..nr).map(|j| d2(f.at(nz - 1, j), f.at(nz - 2, j), f.at(nz - 3, j)) * iz).collect(),
            rr_lo: (0..nz).map(|i| d2(f.at(i, 0), f.at(i, 1), f.at(i, 2)) * ir).collect(),
            rr_hi: (0..nz).map(|i| d2(f.at(i, nr - 1), f.at(i, nr - 2), f.at(i, nr - 3)) * ir).collect(),
        }
    }

    /// Overwrites the boundary of `v` by extrapolation from the interior:
    /// rate faces first, then the log-price faces (which fixes the corners).
    pub fn fill(&self, g: &SpatialGrid2D, v: &mut [f64]) {
        let (nz, nr) = (g.n_z, g.n_r);
        let (hz2, hr2) = (g.h_z() * g.h_z(), g.h_r() * g.h_r());
        for i in 1..nz - 1 {
            let row = i * nr;
            v[row] = 2.0 * v[row + 1] - v[row + 2] + hr2 * self.rr_lo[i];
            v[row + nr - 1] = 2.0 * v[row + nr - 2] - v[row + nr - 3] + hr2 * self.rr_hi[i];
        }
        for j in 0..nr {
            v[j] = 2.0 * v[nr + j] - v[2 * nr + j] + hz2 * self.zz_lo[j];
            let (a, b, c) = ((nz - 1) * nr + j, (nz - 2) * nr + j, (nz - 3) * nr + j);
            v[a] = 2.0 * v[b] - v[c] + hz2 * self.zz_hi[j];
        }
    }

    /// Linear combination of the four closures, e.g. to accumulate jumps.
    pub fn axpy(&mut self, a: f64, other: &Closure) {
        for (x, y) in [
            (&mut self.zz_lo, &other.zz_lo),
            (&mut self.zz_hi, &other.zz_hi),
            (&mut self.rr_lo, &other.rr_lo),
            (&mut self.rr_hi, &other.rr_hi),
        ] {
            for (p, q) in x.iter_mut().zip(y) {
                *p += a * q;
            }
        }
    }
}

/// Model coefficients at every node for one time level.
pub fn model_coeffs(
    grid: &SpatialGrid2D,
    hw: &HullWhiteParams,
    t: f64,
    beta11: &Field2D,
    beta12: &Field2D,
    exec: Exec,
) -> Vec<NodeCoeffs> {
    let b_t = hw.b(t);
    let mut out = vec![NodeCoeffs::default(); grid.len()];
    let nr = grid.n_r;
    let (b11, b12) = (beta11.values(), beta12.values());
    exec.fill(&mut out, |p| NodeCoeffs::model(hw, b_t, grid.r(p % nr), b11[p], b12[p]));
    out
}

/// Applies one part of the operator at interior nodes of a field whose
/// boundary is already filled. Boundary entries of the result are zero.
pub fn apply_operator(grid: &SpatialGrid2D, coeffs: &[NodeCoeffs], v: &[f64], part: Part, exec: Exec) -> Vec<f64> {
    let (nz, nr) = (grid.n_z, grid.n_r);
    let (hz, hr) = (grid.h_z(), grid.h_r());
    let mut out = vec![0.0; grid.len()];
    exec.for_each_chunk_mut(&mut out, nr, |i, row| {
        if i == 0 || i + 1 == nz {
            return;
        }
        for j in 1..nr - 1 {
            let w = stencil(&coeffs[i * nr + j], hz, hr, part);
            let mut acc = 0.0;
            for (di, wrow) in w.iter().enumerate() {
                let base = (i + di - 1) * nr + j - 1;
                acc += wrow[0] * v[base] + wrow[1] * v[base + 1] + wrow[2] * v[base + 2];
            }
            row[j] = acc;
        }
    });
    out
}

/// Sparsity pattern and boundary elimination for the interior system.
#[derive(Debug, Clone)]
pub struct InteriorSystem {
    grid: SpatialGrid2D,
    m_z: usize,
    m_r: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    /// Slot of each 3x3 neighbour of an interior row, `usize::MAX` if absent.
    slots: Vec<[usize; 9]>,
    /// Interior combination reproducing each boundary node (empty for interior nodes).
    boundary: Vec<Vec<(usize, f64)>>,
}

impl InteriorSystem {
    pub fn new(grid: SpatialGrid2D) -> Result<Self> {
        if grid.n_z < 4 || grid.n_r < 4 {
            return invalid(format!(
                "the PDE solvers need at least 4 nodes per axis, got {}x{}",
                grid.n_z, grid.n_r
            ));
        }
        let (m_z, m_r) = (grid.n_z - 2, grid.n_r - 2);
        let n = m_z * m_r;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col = Vec::with_capacity(9 * n);
        let mut slots = Vec::with_capacity(n);
        row_ptr.push(0);
        for a in 0..m_z {
            for b in 0..m_r {
                let mut s = [usize::MAX; 9];
                for da in 0..3 {
                    for db in 0..3 {
                        let (x, y) = (a + da, b + db);
                        if x >= 1 && y >= 1 && x <= m_z && y <= m_r {
                            s[da * 3 + db] = col.len();
                            col.push((x - 1) * m_r + (y - 1));
                        }
                    }
                }
                slots.push(s);
                row_ptr.push(col.len());
            }
        }
        let boundary = Self::boundary_map(&grid);
        Ok(Self { grid, m_z, m_r, row_ptr, col, slots, boundary })
    }

    fn boundary_map(g: &SpatialGrid2D) -> Vec<Vec<(usize, f64)>> {
        let (nz, nr) = (g.n_z, g.n_r);
        let m_r = nr - 2;
        let mut map: Vec<Vec<(usize, f64)>> = vec![Vec::new(); g.len()];
        let interior = |i: usize, j: usize| vec![((i - 1) * m_r + (j - 1), 1.0)];
        let combine = |a: &[(usize, f64)], b: &[(usize, f64)]| {
            let mut out: Vec<(usize, f64)> = a.iter().map(|&(k, c)| (k, 2.0 * c)).collect();
            for &(k, c) in b {
                match out.iter_mut().find(|(kk, _)| *kk == k) {
                    Some(e) => e.1 -= c,
                    None => out.push((k, -c)),
                }
            }
            out.retain(|&(_, c)| c != 0.0);
            out
        };
        let expr = |map: &Vec<Vec<(usize, f64)>>, i: usize, j: usize| {
            if g.is_boundary(i, j) {
                map[g.idx(i, j)].clone()
            } else {
                interior(i, j)
            }
        };
        for i in 1..nz - 1 {
            let lo = combine(&interior(i, 1), &interior(i, 2));
            let hi = combine(&interior(i, nr - 2), &interior(i, nr - 3));
            map[g.idx(i, 0)] = lo;
            map[g.idx(i, nr - 1)] = hi;
        }
        for j in 0..nr {
            let lo = combine(&expr(&map, 1, j), &expr(&map, 2, j));
            let hi = combine(&expr(&map, nz - 2, j), &expr(&map, nz - 3, j));
            map[g.idx(0, j)] = lo;
            map[g.idx(nz - 1, j)] = hi;
        }
        map
    }

    pub fn grid(&self) -> &SpatialGrid2D {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.m_z * self.m_r
    }

    /// Full-grid index of interior unknown `p`.
    #[inline]
    pub fn node(&self, p: usize) -> usize {
        let (a, b) = (p / self.m_r, p % self.m_r);
        (a + 1) * self.grid.n_r + b + 1
    }

    pub fn gather(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|p| v[self.node(p)]).collect()
    }

    /// Expands interior values to the full grid through the closure.
    pub fn scatter(&self, x: &[f64], closure: &Closure) -> Field2D {
        let mut v = vec![0.0; self.grid.len()];
        for (p, &xp) in x.iter().enumerate() {
            v[self.node(p)] = xp;
        }
        closure.fill(&self.grid, &mut v);
        Field2D::from_raw(self.grid, v)
    }

    /// Assembles `I - theta dt L` on the interior with the boundary
    /// eliminated. The second return value collects the closure constants
    /// and must be added to the right-hand side.
    pub fn assemble(&self, coeffs: &[NodeCoeffs], theta_dt: f64, closure: &Closure, exec: Exec) -> (CsrMatrix, Vec<f64>) {
        let g = &self.grid;
        let (hz, hr, nr) = (g.h_z(), g.h_r(), g.n_r);
        let offset = self.boundary_constants(closure);
        let n = self.n();
        let mut rows = vec![([0.0f64; 9], 0.0f64); n];
        exec.fill(&mut rows, |p| {
            let node = self.node(p);
            let (i, j) = (node / nr, node % nr);
            let w = stencil(&coeffs[node], hz, hr, Part::Full);
            let mut vals = [0.0; 9];
            let mut rhs = 0.0;
            vals[4] = 1.0;
            for di in 0..3 {
                for dj in 0..3 {
                    let wt = -theta_dt * w[di][dj];
                    if wt == 0.0 {
                        continue;
                    }
                    let (ni, nj) = (i + di - 1, j + dj - 1);
                    if g.is_boundary(ni, nj) {
                        let nb = ni * nr + nj;
                        rhs -= wt * offset[nb];
                        for &(q, c) in &self.boundary[nb] {
                            vals[self.local_slot(p, q)] += wt * c;
                        }
                    } else {
                        vals[di * 3 + dj] += wt;
                    }
                }
            }
            (vals, rhs)
        });
        let mut val = vec![0.0; self.col.len()];
        let mut rhs = vec![0.0; n];
        for (p, (vals, r)) in rows.into_iter().enumerate() {
            for (k, v) in vals.iter().enumerate() {
                let s = self.slots[p][k];
                if s != usize::MAX {
                    val[s] += v;
                } else {
                    debug_assert!(*v == 0.0);
                }
            }
            rhs[p] = r;
        }
        let a = CsrMatrix { n, row_ptr: self.row_ptr.clone(), col: self.col.clone(), val };
        (a, rhs)
    }

    /// Right-hand-side contribution of the closure constants for a system
    /// assembled from the same coefficients by [`Self::assemble`].
    pub fn closure_offset(&self, coeffs: &[NodeCoeffs], theta_dt: f64, closure: &Closure, exec: Exec) -> Vec<f64> {
        let g = &self.grid;
        let (hz, hr, nr) = (g.h_z(), g.h_r(), g.n_r);
        let offset = self.boundary_constants(closure);
        let mut out = vec![0.0; self.n()];
        exec.fill(&mut out, |p| {
            let node = self.node(p);
            let (i, j) = (node / nr, node % nr);
            let w = stencil(&coeffs[node], hz, hr, Part::Full);
            let mut rhs = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    let (ni, nj) = (i + di - 1, j + dj - 1);
                    if g.is_boundary(ni, nj) {
                        rhs += theta_dt * w[di][dj] * offset[ni * nr + nj];
                    }
                }
            }
            rhs
        });
        out
    }

    /// Boundary values of a field with zero interior: the affine part of the closure.
    fn boundary_constants(&self, closure: &Closure) -> Vec<f64> {
        let mut offset = vec![0.0; self.grid.len()];
        closure.fill(&self.grid, &mut offset);
        offset
    }

    /// 3x3 position of interior unknown `q` relative to row `p`.
    #[inline]
    fn local_slot(&self, p: usize, q: usize) -> usize {
        let (pa, pb) = ((p / self.m_r) as isize, (p % self.m_r) as isize);
        let (qa, qb) = ((q / self.m_r) as isize, (q % self.m_r) as isize);
        let (da, db) = (qa - pa + 1, qb - pb + 1);
        debug_assert!((0..3).contains(&da) && (0..3).contains(&db), "elimination left the 9-point pattern");
        (da * 3 + db) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{bicgstab, Ilu0};

    fn grid(n: usize) -> SpatialGrid2D {
        SpatialGrid2D::new(4.0, 5.0, 0.0, 5.0, n, n + 1).unwrap()
    }

    #[test]
    fn closure_of_a_slice_reproduces_its_boundary() {
        let g = grid(9);
        let f = Field2D::from_fn(g, |z, r| (z * 1.3).sin() * (0.3 * r).exp() + z * r);
        let c = Closure::from_slice(&f);
        let mut v = f.values().to_vec();
        c.fill(&g, &mut v);
        for (a, b) in v.iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_map_matches_fill() {
        let g = grid(7);
        let sys = InteriorSystem::new(g).unwrap();
        let x: Vec<f64> = (0..sys.n()).map(|p| (p as f64 * 0.7).cos()).collect();
        let full = sys.scatter(&x, &Closure::zero(&g));
        for node in 0..g.len() {
            let (i, j) = (node / g.n_r, node % g.n_r);
            if g.is_boundary(i, j) {
                let v: f64 = sys.boundary[node].iter().map(|&(q, c)| c * x[q]).sum();
                assert!((v - full.values()[node]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assembled_matrix_reproduces_operator() {
        // A x + offset == x - dt L (scatter x) at interior nodes
        let g = grid(8);
        let sys = InteriorSystem::new(g).unwrap();
        let coeffs: Vec<NodeCoeffs> = (0..g.len())
            .map(|p| NodeCoeffs {
                mu_z: 0.1 + 0.01 * p as f64,
                mu_r: -0.3,
                d_zz: 0.2,
                d_zr: 0.05,
                d_rr: 0.4 + 0.001 * p as f64,
                c: 0.02,
            })
            .collect();
        let f = Field2D::from_fn(g, |z, r| (z * z).sin() + 0.1 * r * r);
        let closure = Closure::from_slice(&f);
        let dt = 0.01;
        let (a, off) = sys.assemble(&coeffs, dt, &closure, Exec::Sequential);
        let x = sys.gather(f.values());
        let mut ax = vec![0.0; sys.n()];
        a.matvec(&x, &mut ax, Exec::Sequential);
        let lf = apply_operator(&g, &coeffs, f.values(), Part::Full, Exec::Sequential);
        for p in 0..sys.n() {
            let node = sys.node(p);
            let direct = f.values()[node] - dt * lf[node];
            assert!((ax[p] - off[p] - direct).abs() < 1e-11, "row {p}: {} vs {}", ax[p] - off[p], direct);
        }
        // the split parts add up to the full operator
        let parts: Vec<Vec<f64>> = [Part::Explicit, Part::Z, Part::R]
            .iter()
            .map(|&pt| apply_operator(&g, &coeffs, f.values(), pt, Exec::Parallel))
            .collect();
        for k in 0..g.len() {
            assert!((parts[0][k] + parts[1][k] + parts[2][k] - lf[k]).abs() < 1e-10);
        }
        // and the system is solvable
        let pre = Ilu0::new(&a).unwrap();
        let mut sol = vec![0.0; sys.n()];
        let b: Vec<f64> = ax.clone();
        bicgstab(&a, &pre, &b, &mut sol, 1e-12, 100, Exec::Sequential).unwrap();
        for p in 0..sys.n() {
            assert!((sol[p] - x[p]).abs() < 1e-9);
        }
    }

    #[test]
    fn small_grids_rejected() {
        assert!(InteriorSystem::new(SpatialGrid2D::new(0.0, 1.0, 0.0, 1.0, 3, 10).unwrap()).is_err());
    }
}
