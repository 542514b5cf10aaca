//! Dense symmetric positive-definite solves for the small matrices this
//! crate needs (Cox information, θ-Hessian, efficient information; p and
//! d+p are single digits). Hand-rolled Cholesky keeps the numerics easy to
//! audit and avoids a LAPACK dependency.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of an SPD matrix.
pub struct Cholesky {
    l: Array2<f64>,
}

/// Factorizes a symmetric positive-definite matrix. Fails with a numerical
/// error when a pivot is non-positive (matrix singular or indefinite).
pub fn cholesky(a: ArrayView2<f64>) -> Result<Cholesky> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(format!(
            "expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::numerical(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        l[[j, j]] = d.sqrt();
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / l[[j, j]];
        }
    }
    Ok(Cholesky { l })
}

impl Cholesky {
    /// Solves `A x = b` via forward/back substitution.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.l.nrows();
        assert_eq!(b.len(), n, "right-hand side length mismatch");
        let mut y = b.to_owned();
        for i in 0..n {
            for k in 0..i {
                let t = self.l[[i, k]] * y[k];
                y[i] -= t;
            }
            y[i] /= self.l[[i, i]];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let t = self.l[[k, i]] * y[k];
                y[i] -= t;
            }
            y[i] /= self.l[[i, i]];
        }
        y
    }

    /// Explicit inverse, column by column.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.l.nrows();
        let mut inv = Array2::<f64>::zeros((n, n));
        let mut e = Array1::<f64>::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(e.view());
            inv.column_mut(j).assign(&col);
        }
        // Symmetrize to remove round-off drift between columns.
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[[i, j]] + inv[[j, i]]);
                inv[[i, j]] = m;
                inv[[j, i]] = m;
            }
        }
        inv
    }
}

/// Maximum absolute column sum.
pub fn one_norm(a: ArrayView2<f64>) -> f64 {
    let mut max = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        max = max.max(s);
    }
    max
}

/// Solves an SPD system in one call.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(cholesky(a)?.solve(b))
}

/// Inverse of an SPD matrix together with its 1-norm condition number
/// `‖A‖₁ ‖A⁻¹‖₁`.
pub fn inverse_spd(a: ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
    let inv = cholesky(a)?.inverse();
    let cond = one_norm(a) * one_norm(inv.view());
    Ok((inv, cond))
}

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn asymmetry(a: ArrayView2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}
