//! Dense kernels shared by the regression functionals.
//!
//! Matrices are row-major `Vec<f64>`. The weighted Gram matrix
//! `sum_i w_i u_i u_i^T` is formed as `X^T X` with `X = diag(sqrt(w)) U`
//! through a blocked GEMM, which dominates the cost of every draw.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Condition-number guard for singular-design detection.
pub(crate) const CONDITION_LIMIT: f64 = 1e12;

/// `C = A^T A` for a row-major `rows x k` matrix `A`; returns row-major `k x k`.
pub(crate) fn gram(a: &[f64], rows: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * k);
    let mut c = vec![0.0; k * k];
    if rows == 0 || k == 0 {
        return c;
    }
    // A^T is k x rows with row stride 1 and column stride k.
    unsafe {
        matrixmultiply::dgemm(
            k,
            rows,
            k,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            a.as_ptr(),
            k as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    // Exact symmetry regardless of kernel rounding order.
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (c[i * k + j] + c[j * k + i]);
            c[i * k + j] = v;
            c[j * k + i] = v;
        }
    }
    c
}

/// `sum_i w_i u_i u_i^T` and `sum_i w_i u_i y_i` for a row-major design.
pub(crate) fn weighted_normal_equations(design: &[f64], y: &[f64], k: usize, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = weights.len();
    let mut scaled = Vec::with_capacity(rows * k);
    let mut rhs = vec![0.0; k];
    for (i, &w) in weights.iter().enumerate() {
        let s = w.sqrt();
        let row = &design[i * k..(i + 1) * k];
        scaled.extend(row.iter().map(|&u| u * s));
        let wy = w * y[i];
        for (r, &u) in rhs.iter_mut().zip(row) {
            *r += wy * u;
        }
    }
    (gram(&scaled, rows, k), rhs)
}

/// Cholesky factorisation of a symmetric positive-definite matrix after
/// Jacobi equilibration, rejecting ill-conditioned input.
pub(crate) struct SpdSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    scale: Vec<f64>,
}

impl SpdSolver {
    /// Factor a row-major `k x k` matrix. The condition estimate is the
    /// squared ratio of the extreme pivots of the equilibrated factor, a
    /// lower bound on the 2-norm condition number that tracks it closely for
    /// near-rank-deficient Gram matrices.
    pub(crate) fn new(m: &[f64], k: usize) -> Result<Self> {
        let mut scale = vec![0.0; k];
        for i in 0..k {
            let d = m[i * k + i];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::SingularDesign {
                    condition: f64::INFINITY,
                });
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let eq = DMatrix::from_fn(k, k, |i, j| m[i * k + j] * scale[i] * scale[j]);
        let chol = nalgebra::Cholesky::new(eq).ok_or(Error::SingularDesign {
            condition: f64::INFINITY,
        })?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..k {
            let p = l[(i, i)].abs();
            lo = lo.min(p);
            hi = hi.max(p);
        }
        let condition = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
        if !(condition <= CONDITION_LIMIT) {
            return Err(Error::SingularDesign { condition });
        }
        Ok(Self { chol, scale })
    }

    pub(crate) fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_iterator(rhs.len(), rhs.iter().zip(&self.scale).map(|(r, s)| r * s));
        let x = self.chol.solve(&b);
        x.iter().zip(&self.scale).map(|(v, s)| v * s).collect()
    }

    /// Row-major inverse of the original (un-equilibrated) matrix.
    pub(crate) fn inverse(&self) -> Vec<f64> {
        let k = self.scale.len();
        let inv = self.chol.inverse();
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                out[i * k + j] = inv[(i, j)] * self.scale[i] * self.scale[j];
            }
        }
        out
    }
}

/// Solve `M x = v` for symmetric positive-definite `M` with the singularity guard.
pub(crate) fn spd_solve(m: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    Ok(SpdSolver::new(m, v.len())?.solve(v))
}
