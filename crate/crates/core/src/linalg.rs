//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `A x = b` for symmetric positive (semi)definite `A`.
///
/// Tries a Cholesky factorisation first; if that fails (numerically
/// indefinite or singular) falls back to the minimum-norm solution from a
/// symmetric eigendecomposition with small eigenvalues truncated.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::Solver(format!(
            "shape mismatch: {}x{} system with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    solve_sym_pinv(a, b)
}

/// Minimum-norm solution of a symmetric system via eigendecomposition.
pub fn solve_sym_pinv(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max.is_finite()) || max == 0.0 {
        return Err(Error::Solver("system matrix is zero or non-finite".into()));
    }
    let cutoff = max * a.nrows() as f64 * f64::EPSILON;
    let proj = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_fn(proj.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l.abs() > cutoff {
            proj[i] / l
        } else {
            0.0
        }
    });
    let x = &eig.eigenvectors * scaled;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Solver("eigendecomposition produced non-finite solution".into()))
    }
}

/// `|A x - b| / max(|b|, tiny)`.
pub fn relative_residual(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let r = a * x - b;
    r.norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Stacks equal-length vectors into one column vector.
pub fn stack(vs: &[DVector<f64>]) -> DVector<f64> {
    let total = vs.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for v in vs {
        out.rows_mut(at, v.len()).copy_from(v);
        at += v.len();
    }
    out
}

/// Splits a stacked vector into blocks of length `p`.
pub fn unstack(v: &DVector<f64>, p: usize) -> Vec<DVector<f64>> {
    v.as_slice()
        .chunks(p)
        .map(DVector::from_column_slice)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_and_fallback_agree_on_pd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x1 = solve_spd(&a, &b).unwrap();
        let x2 = solve_sym_pinv(&a, &b).unwrap();
        assert!((x1 - x2).amax() < 1e-12);
    }

    #[test]
    fn singular_system_gets_min_norm_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 2.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((x - DVector::from_vec(vec![1.0, 1.0])).amax() < 1e-12);
    }

    #[test]
    fn stack_roundtrip() {
        let vs = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])];
        let s = stack(&vs);
        assert_eq!(s.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unstack(&s, 2), vs);
    }
}
