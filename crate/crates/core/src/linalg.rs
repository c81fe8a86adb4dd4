//! Small dense f64 routines backing the closed-form solvers.

use crate::error::{Error, Result};

/// Cholesky factorization of a symmetric positive-definite matrix (in place,
/// lower triangle). Fails if a pivot is not strictly positive.
pub fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Numerical {
                op: "cholesky",
                msg: format!("non-positive pivot {d:.3e} at row {j}; system is singular or indefinite"),
            });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solve A·X = B for X given the Cholesky factor L of A (lower triangle of
/// `l`). B is n×m row-major and is overwritten with the solution.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    // forward: L y = b
    for i in 0..n {
        for c in 0..m {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        for c in 0..m {
            let mut s = b[i * m + c];
            for k in (i + 1)..n {
                s -= l[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / l[i * n + i];
        }
    }
}
