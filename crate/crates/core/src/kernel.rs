//! Scalar kernels.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// A stationary scalar kernel on real vectors.
///
/// `time_derivative` is the derivative of the one-dimensional kernel with
/// respect to its first argument; the smoother uses it to differentiate its
/// kernel expansion analytically.
pub trait ScalarKernel {
    fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64>;

    /// The kernel on scalar inputs.
    fn eval_scalar(&self, t: f64, s: f64) -> f64;

    /// `d k(t, s) / dt`.
    fn time_derivative(&self, t: f64, s: f64) -> f64;
}

/// `k(x, z) = exp(-gamma * |x - z|^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    gamma: f64,
}

impl GaussianKernel {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self { gamma })
        } else {
            Err(Error::validation(format!(
                "kernel gamma must be positive and finite, got {gamma}"
            )))
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Unchecked evaluation on equal-length slices.
    #[inline]
    pub(crate) fn eval_slices(&self, x: &[f64], z: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), z.len());
        let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        (-self.gamma * d2).exp()
    }
}

impl ScalarKernel for GaussianKernel {
    fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        check_dim(x.len(), z.len())?;
        Ok(self.eval_slices(x, z))
    }

    #[inline]
    fn eval_scalar(&self, t: f64, s: f64) -> f64 {
        let d = t - s;
        (-self.gamma * d * d).exp()
    }

    #[inline]
    fn time_derivative(&self, t: f64, s: f64) -> f64 {
        let d = t - s;
        -2.0 * self.gamma * d * (-self.gamma * d * d).exp()
    }
}

/// Gram matrix `G[i][j] = k(X[i], Z[j])`.
pub fn gram(kernel: &GaussianKernel, xs: &[DVector<f64>], zs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let dim = xs.first().or(zs.first()).map_or(0, |v| v.len());
    for v in xs.iter().chain(zs) {
        check_dim(dim, v.len())?;
    }
    Ok(DMatrix::from_fn(xs.len(), zs.len(), |i, j| {
        kernel.eval_slices(xs[i].as_slice(), zs[j].as_slice())
    }))
}

/// Gram matrix on scalar inputs (observation or collocation times).
pub fn gram_1d(kernel: &GaussianKernel, ts: &[f64], ss: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(ts.len(), ss.len(), |i, j| kernel.eval_scalar(ts[i], ss[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k(gamma: f64) -> GaussianKernel {
        GaussianKernel::new(gamma).unwrap()
    }

    #[test]
    fn rejects_nonpositive_gamma() {
        assert!(GaussianKernel::new(0.0).is_err());
        assert!(GaussianKernel::new(-1.0).is_err());
        assert!(GaussianKernel::new(f64::NAN).is_err());
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(k(1.0).eval(&[0.3], &[0.3]).unwrap(), 1.0);
        assert_abs_diff_eq!(k(1.0).eval(&[0.0], &[1.0]).unwrap(), 0.367_879_441_171_442_3, epsilon = 1e-15);
        // |(0,0) - (1,1)|^2 = 2, so exp(-2 * 2)
        assert_abs_diff_eq!(
            k(2.0).eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            0.018_315_638_888_734_18,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            k(1.0).eval(&[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let xs = vec![DVector::from_vec(vec![0.0])];
        let zs = vec![DVector::from_vec(vec![0.0, 1.0])];
        assert!(gram(&k(1.0), &xs, &zs).is_err());
    }

    #[test]
    fn derivative_values() {
        assert_eq!(k(1.0).time_derivative(0.7, 0.7), 0.0);
        assert_abs_diff_eq!(k(1.0).time_derivative(1.0, 0.0), -0.735_758_882_342_884_6, epsilon = 1e-15);
    }

    #[test]
    fn single_point_gram() {
        let x = vec![DVector::from_vec(vec![0.5, -1.0])];
        let z = vec![DVector::from_vec(vec![1.0, 0.0])];
        let g = gram(&k(0.5), &x, &z).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], k(0.5).eval(x[0].as_slice(), z[0].as_slice()).unwrap());
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let pts: Vec<DVector<f64>> = [[0.1, 0.4], [1.3, -0.2], [0.7, 0.9], [-1.1, 0.0], [0.2, 0.35]]
            .iter()
            .map(|p| DVector::from_row_slice(p))
            .collect();
        let g = gram(&k(1.5), &pts, &pts).unwrap();
        for i in 0..5 {
            assert_eq!(g[(i, i)], 1.0);
            for j in 0..5 {
                assert_eq!(g[(i, j)], g[(j, i)]);
            }
        }
        let min = g.symmetric_eigenvalues().min();
        assert!(min >= -1e-10, "min eigenvalue {min}");
    }

    proptest! {
        #[test]
        fn derivative_matches_central_difference(t in -5.0f64..5.0, s in -5.0f64..5.0, gamma in 0.01f64..10.0) {
            let kern = k(gamma);
            let h = 1e-6;
            let fd = (kern.eval_scalar(t + h, s) - kern.eval_scalar(t - h, s)) / (2.0 * h);
            prop_assert!((fd - kern.time_derivative(t, s)).abs() <= 1e-6);
        }

        #[test]
        fn eval_is_symmetric(x in proptest::collection::vec(-3.0f64..3.0, 3), z in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let kern = k(0.8);
            prop_assert_eq!(kern.eval(&x, &z).unwrap(), kern.eval(&z, &x).unwrap());
        }
    }
}
