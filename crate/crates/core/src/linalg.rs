//! Sparse linear algebra for the implicit steps: CSR storage, ILU(0) and a
//! right-preconditioned BiCGSTAB, plus the Thomas algorithm for ADI lines.

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Compressed sparse row matrix with sorted column indices.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], y: &mut [f64], exec: Exec) {
        exec.fill(y, |i| {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            acc
        });
    }

    fn diag_positions(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.col[k] == i)
                    .expect("structurally missing diagonal")
            })
            .collect()
    }
}

/// Incomplete LU factorization with the sparsity pattern of the matrix.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let mut lu = a.clone();
        let diag = lu.diag_positions();
        // column -> position lookup for the current row
        let mut pos = vec![usize::MAX; lu.n];
        for i in 0..lu.n {
            let (lo, hi) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in lo..hi {
                pos[lu.col[k]] = k;
            }
            for k in lo..hi {
                let j = lu.col[k];
                if j >= i {
                    break;
                }
                let piv = lu.val[diag[j]];
                let m = lu.val[k] / piv;
                lu.val[k] = m;
                for kk in diag[j] + 1..lu.row_ptr[j + 1] {
                    let p = pos[lu.col[kk]];
                    if p != usize::MAX {
                        lu.val[p] -= m * lu.val[kk];
                    }
                }
            }
            for k in lo..hi {
                pos[lu.col[k]] = usize::MAX;
            }
            let d = lu.val[diag[i]];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::Numerical { node: i, what: "zero pivot in ILU(0)".into() });
            }
        }
        Ok(Self { lu, diag })
    }

    /// Solves `L U x = b` in place.
    pub fn apply(&self, x: &mut [f64]) {
        let a = &self.lu;
        for i in 0..a.n {
            let mut acc = x[i];
            for k in a.row_ptr[i]..self.diag[i] {
                acc -= a.val[k] * x[a.col[k]];
            }
            x[i] = acc;
        }
        for i in (0..a.n).rev() {
            let mut acc = x[i];
            for k in self.diag[i] + 1..a.row_ptr[i + 1] {
                acc -= a.val[k] * x[a.col[k]];
            }
            x[i] = acc / a.val[self.diag[i]];
        }
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64], exec: Exec) -> f64 {
    exec.sum(a.len(), |i| a[i] * b[i])
}

/// Solves `A x = b` by BiCGSTAB right-preconditioned with ILU(0), starting
/// from the contents of `x`, until the true residual has sup-norm `<= tol`.
/// Returns the iteration count.
pub fn bicgstab(a: &CsrMatrix, pre: &Ilu0, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize, exec: Exec) -> Result<usize> {
    let n = a.n;
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r, exec);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if sup(&r) <= tol {
        return Ok(0);
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut restarts = 0;
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r, exec);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            // breakdown: restart from the current iterate
            restarts += 1;
            if restarts > 5 {
                break;
            }
            a.matvec(x, &mut r, exec);
            for i in 0..n {
                r[i] = b[i] - r[i];
                p[i] = 0.0;
                v[i] = 0.0;
            }
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        p_hat.copy_from_slice(&p);
        pre.apply(&mut p_hat);
        a.matvec(&p_hat, &mut v, exec);
        alpha = rho / dot(&r_hat, &v, exec);
        // r becomes s
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        if sup(&r) <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok(it);
        }
        s_hat.copy_from_slice(&r);
        pre.apply(&mut s_hat);
        a.matvec(&s_hat, &mut t, exec);
        let tt = dot(&t, &t, exec);
        omega = if tt > 0.0 { dot(&t, &r, exec) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] -= omega * t[i];
        }
        if sup(&r) <= tol {
            // confirm with the true residual
            a.matvec(x, &mut t, exec);
            let true_res = (0..n).fold(0.0f64, |m, i| m.max((b[i] - t[i]).abs()));
            if true_res <= tol {
                return Ok(it);
            }
            for i in 0..n {
                r[i] = b[i] - t[i];
            }
        }
    }
    a.matvec(x, &mut t, exec);
    let residual = (0..n).fold(0.0f64, |m, i| m.max((b[i] - t[i]).abs()));
    if residual <= tol {
        return Ok(max_iter);
    }
    Err(Error::LinearSolver { iterations: max_iter, residual })
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
/// `rhs` is overwritten with the solution; `scratch` must have the same length.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    let mut beta = diag[0];
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_like(m: usize, shift: f64) -> CsrMatrix {
        // 5-point operator with a convection skew on an m x m grid
        let n = m * m;
        let (mut row_ptr, mut col, mut val) = (vec![0], vec![], vec![]);
        for i in 0..m {
            for j in 0..m {
                let mut push = |ii: isize, jj: isize, v: f64| {
                    if ii >= 0 && jj >= 0 && (ii as usize) < m && (jj as usize) < m {
                        col.push(ii as usize * m + jj as usize);
                        val.push(v);
                    }
                };
                let (i, j) = (i as isize, j as isize);
                push(i - 1, j, -1.2);
                push(i, j - 1, -0.9);
                push(i, j, 4.0 + shift);
                push(i, j + 1, -1.1);
                push(i + 1, j, -0.8);
                row_ptr.push(col.len());
            }
        }
        CsrMatrix { n, row_ptr, col, val }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric_system() {
        let a = laplacian_like(20, 0.5);
        let x_true: Vec<f64> = (0..a.n).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut b = vec![0.0; a.n];
        a.matvec(&x_true, &mut b, Exec::Sequential);
        let pre = Ilu0::new(&a).unwrap();
        let mut x = vec![0.0; a.n];
        let it = bicgstab(&a, &pre, &b, &mut x, 1e-13, 200, Exec::Sequential).unwrap();
        assert!(it < 60, "{it} iterations");
        let err = x.iter().zip(&x_true).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(err < 1e-11, "{err}");
    }

    #[test]
    fn ilu_is_exact_for_tridiagonal() {
        let n = 6;
        let (mut row_ptr, mut col, mut val) = (vec![0], vec![], vec![]);
        for i in 0..n {
            if i > 0 {
                col.push(i - 1);
                val.push(-1.0);
            }
            col.push(i);
            val.push(3.0);
            if i + 1 < n {
                col.push(i + 1);
                val.push(-0.5);
            }
            row_ptr.push(col.len());
        }
        let a = CsrMatrix { n, row_ptr, col, val };
        let pre = Ilu0::new(&a).unwrap();
        let b: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let mut x = b.clone();
        pre.apply(&mut x);
        let mut ax = vec![0.0; n];
        a.matvec(&x, &mut ax, Exec::Sequential);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-13);
        }
        // Thomas agrees
        let mut rhs = b.clone();
        let mut scratch = vec![0.0; n];
        solve_tridiagonal(&[0.0, -1.0, -1.0, -1.0, -1.0, -1.0], &[3.0; 6], &[-0.5, -0.5, -0.5, -0.5, -0.5, 0.0], &mut rhs, &mut scratch);
        for i in 0..n {
            assert!((rhs[i] - x[i]).abs() < 1e-13);
        }
    }
}
