//! Per-variable kernel ridge smoothing of the observed trajectory.
//!
//! Each state variable `j` gets its own expansion
//! `g_j(t) = sum_i b_ij k_j(t, t_i)` with `b_j = (K_j + lambda_j I)^{-1} y_j`.
//! The derivative `g_j'(t)` is obtained by differentiating the kernel
//! analytically, so no finite differences enter the pipeline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{gram_1d, GaussianKernel, ScalarKernel};
use crate::linalg::solve_spd;
use crate::timeseries::TimeSeries;

/// Kernel ridge model of one state variable over time.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSmoother {
    kernel: GaussianKernel,
    ridge: f64,
    coeffs: DVector<f64>,
    train_times: Vec<f64>,
}

impl VariableSmoother {
    /// Solves `(K + ridge I) b = y` on the training times.
    pub fn fit(times: &[f64], y: &DVector<f64>, kernel: GaussianKernel, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::validation(format!("smoother ridge must be positive, got {ridge}")));
        }
        if times.len() < 2 {
            return Err(Error::validation("smoother needs at least 2 observations"));
        }
        if times.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: y.len(),
            });
        }
        let mut system = gram_1d(&kernel, times, times);
        for i in 0..times.len() {
            system[(i, i)] += ridge;
        }
        let coeffs = solve_spd(&system, y)?;
        Ok(Self {
            kernel,
            ridge,
            coeffs,
            train_times: times.to_vec(),
        })
    }

    /// Assembles a smoother from explicit coefficients.
    pub fn from_parts(train_times: Vec<f64>, coeffs: DVector<f64>, kernel: GaussianKernel, ridge: f64) -> Result<Self> {
        if train_times.len() != coeffs.len() {
            return Err(Error::DimensionMismatch {
                expected: train_times.len(),
                got: coeffs.len(),
            });
        }
        Ok(Self {
            kernel,
            ridge,
            coeffs,
            train_times,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.train_times
            .iter()
            .zip(self.coeffs.iter())
            .map(|(&ti, &b)| b * self.kernel.eval_scalar(t, ti))
            .sum()
    }

    pub fn eval_derivative(&self, t: f64) -> f64 {
        self.train_times
            .iter()
            .zip(self.coeffs.iter())
            .map(|(&ti, &b)| b * self.kernel.time_derivative(t, ti))
            .sum()
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn train_times(&self) -> &[f64] {
        &self.train_times
    }
}

/// Free-function form of [`VariableSmoother::fit`].
pub fn fit_variable(times: &[f64], y: &DVector<f64>, kernel: GaussianKernel, ridge: f64) -> Result<VariableSmoother> {
    VariableSmoother::fit(times, y, kernel, ridge)
}

/// The vector-valued smoother `g: R -> R^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoother {
    variables: Vec<VariableSmoother>,
}

impl Smoother {
    pub fn new(variables: Vec<VariableSmoother>) -> Result<Self> {
        let first = variables
            .first()
            .ok_or_else(|| Error::validation("smoother needs at least one variable"))?;
        if variables.iter().any(|v| v.train_times != first.train_times) {
            return Err(Error::validation("all variable smoothers must share training times"));
        }
        Ok(Self { variables })
    }

    /// Fits every variable with its own `(gamma, ridge)` pair.
    pub fn fit(ts: &TimeSeries, hyper: &[(f64, f64)]) -> Result<Self> {
        if hyper.len() != ts.dim() {
            return Err(Error::DimensionMismatch {
                expected: ts.dim(),
                got: hyper.len(),
            });
        }
        let variables = hyper
            .iter()
            .enumerate()
            .map(|(j, &(gamma, ridge))| {
                VariableSmoother::fit(ts.times(), &ts.variable(j), GaussianKernel::new(gamma)?, ridge)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(variables)
    }

    /// Selects each variable's hyperparameters by leave-one-out CV, then fits.
    pub fn fit_cv(ts: &TimeSeries, grid: &CvGrid) -> Result<(Self, Vec<LooSelection>)> {
        let selections = (0..ts.dim())
            .map(|j| loocv_select(ts.times(), &ts.variable(j), grid))
            .collect::<Result<Vec<_>>>()?;
        let hyper: Vec<(f64, f64)> = selections.iter().map(|s| (s.gamma, s.lambda)).collect();
        Ok((Self::fit(ts, &hyper)?, selections))
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.variables[0].train_times
    }

    pub fn variables(&self) -> &[VariableSmoother] {
        &self.variables
    }

    /// `g(t)`.
    pub fn eval_g(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.variables.iter().map(|v| v.eval(t)))
    }

    /// `g'(t)`.
    pub fn eval_gdot(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.variables.iter().map(|v| v.eval_derivative(t)))
    }
}

/// Hyperparameter grid for leave-one-out selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for CvGrid {
    /// `gamma in {2^-6, ..., 2^4}`, `lambda in {1e-6, ..., 1e1}`.
    fn default() -> Self {
        Self {
            gammas: (-6..=4).map(|k| 2f64.powi(k)).collect(),
            lambdas: (-6..=1).map(|k| 10f64.powi(k)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LooSelection {
    pub gamma: f64,
    pub lambda: f64,
    /// Mean squared leave-one-out residual at the selected pair.
    pub loo_error: f64,
}

/// Leave-one-out residuals `y_i - g_{-i}(t_i)` from the hat-matrix identity.
///
/// With `H = K (K + lambda I)^{-1}` one has `I - H = lambda (K + lambda I)^{-1}`,
/// so `e_i = b_i / [(K + lambda I)^{-1}]_ii`. Returns `None` when some
/// `1 - H_ii` is within `1e-12` of zero and the identity is unreliable.
pub fn loo_residuals_closed_form(
    times: &[f64],
    y: &DVector<f64>,
    kernel: GaussianKernel,
    ridge: f64,
) -> Result<Option<DVector<f64>>> {
    let n = times.len();
    let mut system = gram_1d(&kernel, times, times);
    for i in 0..n {
        system[(i, i)] += ridge;
    }
    let inverse = match system.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => system
            .try_inverse()
            .ok_or_else(|| Error::Solver("kernel ridge system is singular".into()))?,
    };
    let b = &inverse * y;
    let mut residuals = DVector::zeros(n);
    for i in 0..n {
        let one_minus_h = ridge * inverse[(i, i)];
        if !(one_minus_h > 1e-12) {
            return Ok(None);
        }
        residuals[i] = b[i] / inverse[(i, i)];
    }
    Ok(Some(residuals))
}

/// Leave-one-out residuals by refitting `n` times.
pub fn loo_residuals_refit(times: &[f64], y: &DVector<f64>, kernel: GaussianKernel, ridge: f64) -> Result<DVector<f64>> {
    let n = times.len();
    let mut residuals = DVector::zeros(n);
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let t: Vec<f64> = keep.iter().map(|&k| times[k]).collect();
        let yk = DVector::from_iterator(n - 1, keep.iter().map(|&k| y[k]));
        let model = VariableSmoother::fit(&t, &yk, kernel, ridge)?;
        residuals[i] = y[i] - model.eval(times[i]);
    }
    Ok(residuals)
}

/// Mean squared leave-one-out error for one grid point.
pub fn loo_error(times: &[f64], y: &DVector<f64>, kernel: GaussianKernel, ridge: f64) -> Result<f64> {
    let residuals = match loo_residuals_closed_form(times, y, kernel, ridge)? {
        Some(r) => r,
        None => loo_residuals_refit(times, y, kernel, ridge)?,
    };
    Ok(residuals.norm_squared() / times.len() as f64)
}

/// Joint grid search over `(gamma, lambda)` minimising the leave-one-out
/// error. Ties go to the larger `lambda`, then the smaller `gamma`.
pub fn loocv_select(times: &[f64], y: &DVector<f64>, grid: &CvGrid) -> Result<LooSelection> {
    if grid.gammas.is_empty() || grid.lambdas.is_empty() {
        return Err(Error::validation("cross-validation grids must be non-empty"));
    }
    if times.len() < 3 {
        return Err(Error::validation("leave-one-out selection needs at least 3 observations"));
    }
    if times.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: y.len(),
        });
    }
    let mut lambdas = grid.lambdas.clone();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let mut gammas = grid.gammas.clone();
    gammas.sort_by(|a, b| a.total_cmp(b));

    let mut best: Option<LooSelection> = None;
    for &lambda in &lambdas {
        for &gamma in &gammas {
            let err = loo_error(times, y, GaussianKernel::new(gamma)?, lambda)?;
            let better = match &best {
                None => true,
                Some(b) => err < b.loo_error - 1e-12 * b.loo_error.abs().max(f64::MIN_POSITIVE),
            };
            if better && err.is_finite() {
                best = Some(LooSelection {
                    gamma,
                    lambda,
                    loo_error: err,
                });
            }
        }
    }
    best.ok_or_else(|| Error::Numerical("no finite leave-one-out error on the grid".into()))
}

/// Scalar Gram matrix of the smoother's training times (for diagnostics).
pub fn training_gram(s: &VariableSmoother) -> DMatrix<f64> {
    gram_1d(&s.kernel, &s.train_times, &s.train_times)
}
