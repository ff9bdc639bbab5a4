//! Learning the structure matrix `C` of a decomposable kernel.
//!
//! With the scalar Gram matrix `K` (m x m), coefficients `A` (p x m, column
//! l is `a_l`) and targets `Gdot` (p x m), the predictions at the anchors are
//! `C A K` and the loss in `C` is
//!
//! ```text
//! L(C) = 1/2 |Gdot - C A K|_F^2 + lambda_h/2 tr(C A K A')
//! ```
//!
//! minimised over the PSD cone by projected gradient steps, alternating with
//! ridge refits of `A`.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{gram, GaussianKernel};
use crate::linalg::symmetrize;
use crate::matching::{fit_ridge_collocation, Collocation, OdeModel};
use crate::operator::{OperatorKernel, StructureMatrix};
use crate::smoother::Smoother;

/// Nearest PSD matrix in Frobenius norm: negative eigenvalues clamped to 0.
pub fn project_psd(m: &DMatrix<f64>) -> Result<StructureMatrix> {
    if !m.is_square() || m.is_empty() {
        return Err(Error::validation("projection needs a non-empty square matrix"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in matrix to project".into()));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("eigendecomposition failed in PSD projection".into()));
    }
    Ok(StructureMatrix::from_psd(symmetrize(&out)))
}

/// The loss in `C` for fixed coefficients.
#[derive(Debug, Clone)]
pub struct CProblem {
    gram: DMatrix<f64>,
    coeffs: DMatrix<f64>,
    targets: DMatrix<f64>,
    ridge: f64,
    /// `A K`
    ak: DMatrix<f64>,
}

impl CProblem {
    /// `gram` is m x m, `coeffs` and `targets` are p x m.
    pub fn new(gram: DMatrix<f64>, coeffs: DMatrix<f64>, targets: DMatrix<f64>, ridge: f64) -> Result<Self> {
        check_dim(gram.nrows(), gram.ncols())?;
        check_dim(gram.nrows(), coeffs.ncols())?;
        check_dim(coeffs.nrows(), targets.nrows())?;
        check_dim(coeffs.ncols(), targets.ncols())?;
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::validation(format!("lambda_h must be non-negative, got {ridge}")));
        }
        let ak = &coeffs * &gram;
        Ok(Self {
            gram,
            coeffs,
            targets,
            ridge,
            ak,
        })
    }

    pub fn from_collocation(col: &Collocation, scalar: &GaussianKernel, coeffs: DMatrix<f64>, ridge: f64) -> Result<Self> {
        let gram = gram(scalar, &col.anchors, &col.anchors)?;
        let targets = DMatrix::from_column_slice(col.dim(), col.len(), col.gdot.as_slice());
        Self::new(gram, coeffs, targets, ridge)
    }

    pub fn dim(&self) -> usize {
        self.coeffs.nrows()
    }

    /// `Gdot - C A K`.
    pub fn residual(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        &self.targets - c * &self.ak
    }

    pub fn loss(&self, c: &DMatrix<f64>) -> f64 {
        let reg = (c * &self.ak * self.coeffs.transpose()).trace();
        0.5 * self.residual(c).norm_squared() + 0.5 * self.ridge * reg
    }

    /// Symmetrised gradient `sym(-E K A' + lambda_h/2 A K A')`.
    pub fn gradient(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let e = self.residual(c);
        let g = -(e * self.ak.transpose()) + (&self.ak * self.coeffs.transpose()) * (0.5 * self.ridge);
        symmetrize(&g)
    }

    /// `|H_I K A'|_F` with `H_I = A K` the predictions at `C = I`.
    pub fn lipschitz(&self) -> f64 {
        (&self.ak * &self.gram * self.coeffs.transpose()).norm()
    }
}

/// Gradient of the loss in `C`, see [`CProblem::gradient`].
pub fn grad_c(gram: &DMatrix<f64>, coeffs: &DMatrix<f64>, targets: &DMatrix<f64>, c: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let problem = CProblem::new(gram.clone(), coeffs.clone(), targets.clone(), ridge)?;
    check_dim(problem.dim(), c.nrows())?;
    Ok(problem.gradient(c))
}

/// Projected gradient descent on `C` with step `1/L_C`, halving the step
/// whenever the loss would increase. Returns the final `C` and the loss
/// after each accepted step (first entry is the loss at `init`).
pub fn fit_c(problem: &CProblem, init: &StructureMatrix, inner_iters: usize) -> Result<(StructureMatrix, Vec<f64>)> {
    check_dim(problem.dim(), init.dim())?;
    let mut c = init.clone();
    let mut loss = problem.loss(c.matrix());
    let mut history = vec![loss];
    let lipschitz = problem.lipschitz();
    if lipschitz == 0.0 {
        return Ok((c, history));
    }
    for _ in 0..inner_iters {
        let grad = problem.gradient(c.matrix());
        let mut step = 1.0 / lipschitz;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = project_psd(&(c.matrix() - &grad * step))?;
            let cand_loss = problem.loss(cand.matrix());
            if !cand_loss.is_finite() {
                return Err(Error::Divergence("non-finite loss while learning C".into()));
            }
            if cand_loss <= loss {
                accepted = Some((cand, cand_loss));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, cand_loss)) => {
                let stalled = cand == c;
                c = cand;
                loss = cand_loss;
                history.push(loss);
                if stalled {
                    break;
                }
            }
            None => break,
        }
    }
    Ok((c, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelLearnConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub tol: f64,
    /// Identity when `None`.
    pub init_c: Option<StructureMatrix>,
}

impl Default for KernelLearnConfig {
    fn default() -> Self {
        Self {
            outer_iters: 10,
            inner_iters: 50,
            tol: 1e-8,
            init_c: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlternationReport {
    /// Joint objective after each a-step and after each C-step, interleaved.
    pub objectives: Vec<f64>,
    pub outer_iters: usize,
}

/// Alternates ridge refits of the coefficients with projected-gradient
/// updates of `C`. The returned model holds the coefficients of the last
/// a-step and a kernel carrying the final `C`.
pub fn alternate_fit(
    smoother: &Smoother,
    taus: &[f64],
    scalar: &GaussianKernel,
    ridge: f64,
    cfg: &KernelLearnConfig,
) -> Result<(OdeModel, StructureMatrix, AlternationReport)> {
    if cfg.outer_iters == 0 || cfg.inner_iters == 0 {
        return Err(Error::Config("outer_iters and inner_iters must be at least 1".into()));
    }
    let col = Collocation::new(smoother, taus)?;
    let p = col.dim();
    let mut c = cfg.init_c.clone().unwrap_or_else(|| StructureMatrix::identity(p));
    check_dim(p, c.dim())?;
    let mut report = AlternationReport {
        objectives: Vec::new(),
        outer_iters: 0,
    };
    let mut model;
    let mut last = f64::INFINITY;
    loop {
        let kernel = OperatorKernel::decomposable(*scalar, c.clone());
        model = fit_ridge_collocation(&col, &kernel, ridge)?;
        let problem = CProblem::from_collocation(&col, scalar, coeff_matrix(&model), ridge)?;
        report.objectives.push(problem.loss(c.matrix()));
        let (next, history) = fit_c(&problem, &c, cfg.inner_iters)?;
        c = next;
        let obj = *history.last().expect("history starts with the entry loss");
        report.objectives.push(obj);
        report.outer_iters += 1;
        let change = (last - obj).abs() / obj.abs().max(f64::MIN_POSITIVE);
        last = obj;
        if report.outer_iters >= cfg.outer_iters || change < cfg.tol {
            break;
        }
    }
    let kernel = OperatorKernel::decomposable(*scalar, c.clone());
    let model = OdeModel::new(kernel, model.anchors().to_vec(), model.coeffs().to_vec(), ridge)?;
    Ok((model, c, report))
}

/// Coefficients as a p x m matrix.
pub fn coeff_matrix(model: &OdeModel) -> DMatrix<f64> {
    DMatrix::from_columns(model.coeffs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use crate::matching::{window_times, TauMode};
    use crate::timeseries::TimeSeries;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_problem(p: usize, m: usize, ridge: f64, seed: u64) -> CProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<DVector<f64>> = (0..m).map(|_| DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0))).collect();
        let k = gram(&GaussianKernel::new(0.7).unwrap(), &pts, &pts).unwrap();
        CProblem::new(k, random(p, m, &mut rng), random(p, m, &mut rng), ridge).unwrap()
    }

    fn smoother(p: usize) -> Smoother {
        let times: Vec<f64> = (0..14).map(|i| i as f64 * 0.45).collect();
        let rows: Vec<Vec<f64>> = times
            .iter()
            .map(|t| (0..p).map(|j| (t + j as f64).sin() * (1.0 + 0.3 * j as f64)).collect())
            .collect();
        let ts = TimeSeries::from_rows(times, &rows).unwrap();
        Smoother::fit(&ts, &vec![(0.5, 1e-3); p]).unwrap()
    }

    #[test]
    fn projection_cases() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        let out = project_psd(&m).unwrap();
        assert!((out.matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]))).amax() <= 1e-12);

        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((project_psd(&psd).unwrap().matrix() - &psd).amax() <= 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = random(3, 3, &mut rng);
        let once = project_psd(&raw).unwrap();
        let twice = project_psd(once.matrix()).unwrap();
        assert!((once.matrix() - twice.matrix()).amax() <= 1e-12);
        let min = once.matrix().clone().symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-10 * once.matrix().trace().abs());
        assert_eq!(once.matrix(), &once.matrix().transpose());
    }

    #[test]
    fn projection_is_nearest_on_grid() {
        let target = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 0.5]);
        let proj = project_psd(&target).unwrap();
        let best_proj = (proj.matrix() - &target).norm();
        let h = 0.01;
        for i in 0..=300 {
            for k in 0..=300 {
                let (c11, c22) = (i as f64 * h, k as f64 * h);
                let bound = (c11 * c22).sqrt();
                let steps = (bound / h) as i64;
                for j in -steps..=steps {
                    let c = DMatrix::from_row_slice(2, 2, &[c11, j as f64 * h, j as f64 * h, c22]);
                    assert!((c - &target).norm() >= best_proj - 1e-12);
                }
            }
        }
    }

    fn fd_gradient(problem: &CProblem, c: &DMatrix<f64>) -> DMatrix<f64> {
        let h = 1e-6;
        let p = c.nrows();
        let full = DMatrix::from_fn(p, p, |i, j| {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp[(i, j)] += h;
            cm[(i, j)] -= h;
            (problem.loss(&cp) - problem.loss(&cm)) / (2.0 * h)
        });
        symmetrize(&full)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (p, m, seed) in [(2, 3, 1), (3, 5, 2), (1, 4, 3)] {
            let problem = random_problem(p, m, 0.3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let c = random(p, p, &mut rng);
            let c = symmetrize(&c);
            let diff = (problem.gradient(&c) - fd_gradient(&problem, &c)).amax();
            assert!(diff <= 1e-5, "p={p} m={m}: {diff}");
        }
    }

    #[test]
    fn gradient_with_zero_targets_and_ridge() {
        let base = random_problem(2, 3, 0.0, 7);
        let problem = CProblem::new(base.gram.clone(), base.coeffs.clone(), DMatrix::zeros(2, 3), 0.0).unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]);
        let h = &c * &problem.coeffs * &problem.gram;
        let expected = symmetrize(&(h * &problem.gram * problem.coeffs.transpose()));
        assert!((problem.gradient(&c) - &expected).amax() <= 1e-12);
        assert!((problem.gradient(&c) - fd_gradient(&problem, &c)).amax() <= 1e-5);
    }

    #[test]
    fn zero_coefficients() {
        let base = random_problem(2, 3, 0.2, 5);
        let problem = CProblem::new(base.gram.clone(), DMatrix::zeros(2, 3), base.targets.clone(), 0.2).unwrap();
        let c = StructureMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        assert_eq!(problem.gradient(c.matrix()), DMatrix::zeros(2, 2));
        assert_eq!(problem.lipschitz(), 0.0);
        assert_eq!(fit_c(&problem, &c, 10).unwrap().0, c);
    }

    #[test]
    fn lipschitz_bounds_hessian() {
        for seed in 0..5 {
            let problem = random_problem(3, 4, 0.1, seed);
            let hk = &problem.ak * problem.ak.transpose();
            let spectral = hk.symmetric_eigen().eigenvalues.max();
            assert!(problem.lipschitz() >= spectral - 1e-12);
        }
    }

    #[test]
    fn stationary_point_is_fixed() {
        let problem = random_problem(2, 4, 0.1, 11);
        let (c, _) = fit_c(&problem, &StructureMatrix::identity(2), 20_000).unwrap();
        let (again, _) = fit_c(&problem, &c, 1).unwrap();
        assert!((again.matrix() - c.matrix()).amax() <= 1e-8);
    }

    #[test]
    fn c_steps_are_monotone_and_symmetric() {
        let problem = random_problem(3, 5, 0.2, 21);
        let (c, history) = fit_c(&problem, &StructureMatrix::identity(3), 100).unwrap();
        assert!(history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(c.matrix(), &c.matrix().transpose());
    }

    /// Minimum of the loss over 2x2 PSD matrices by successively refined
    /// grids. Entries `(c11, c22, c12)` come from a Cholesky-style factor
    /// `(l11, l21, l22)` so the grid reaches the boundary of the cone.
    fn grid_minimum(problem: &CProblem) -> f64 {
        let (mut lo, mut hi) = ([0.0, -3.0, 0.0], [3.0, 3.0, 3.0]);
        let mut best = (f64::INFINITY, [0.0; 3]);
        for _ in 0..12 {
            let n = 40;
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let at = |d: usize, s: usize| lo[d] + (hi[d] - lo[d]) * s as f64 / n as f64;
                        let (l11, l21, l22) = (at(0, i), at(1, j), at(2, k));
                        let (c11, c12, c22) = (l11 * l11, l11 * l21, l21 * l21 + l22 * l22);
                        let c = DMatrix::from_row_slice(2, 2, &[c11, c12, c12, c22]);
                        let l = problem.loss(&c);
                        if l < best.0 {
                            best = (l, [l11, l21, l22]);
                        }
                    }
                }
            }
            for d in 0..3 {
                let w = (hi[d] - lo[d]) / 4.0;
                lo[d] = best.1[d] - w;
                hi[d] = best.1[d] + w;
            }
        }
        best.0
    }

    #[test]
    fn fit_c_matches_grid_search() {
        for seed in [31, 32] {
            let problem = random_problem(2, 3, 0.1, seed);
            let (c, _) = fit_c(&problem, &StructureMatrix::identity(2), 20_000).unwrap();
            let grid = grid_minimum(&problem);
            let fitted = problem.loss(c.matrix());
            assert!((fitted - grid).abs() <= 1e-4, "seed {seed}: {fitted} vs {grid}");
        }
    }

    #[test]
    fn single_outer_iteration_is_ridge_then_c_step() {
        let s = smoother(2);
        let taus = window_times(&s, 10, TauMode::Regular).unwrap();
        let scalar = GaussianKernel::new(0.8).unwrap();
        let cfg = KernelLearnConfig {
            outer_iters: 1,
            ..Default::default()
        };
        let (model, c, report) = alternate_fit(&s, &taus, &scalar, 0.05, &cfg).unwrap();
        let plain = crate::matching::fit_ridge(&s, &taus, &OperatorKernel::decomposable(scalar, StructureMatrix::identity(2)), 0.05).unwrap();
        assert_eq!(model.coeffs(), plain.coeffs());
        let col = Collocation::new(&s, &taus).unwrap();
        let problem = CProblem::from_collocation(&col, &scalar, coeff_matrix(&plain), 0.05).unwrap();
        let (expected, _) = fit_c(&problem, &StructureMatrix::identity(2), cfg.inner_iters).unwrap();
        assert_eq!(c, expected);
        assert_eq!(model.kernel().structure(), Some(&c));
        assert_eq!(report.outer_iters, 1);
    }

    #[test]
    fn alternation_objective_is_non_increasing() {
        let s = smoother(3);
        let taus = window_times(&s, 12, TauMode::Regular).unwrap();
        let scalar = GaussianKernel::new(0.5).unwrap();
        let (_, _, report) = alternate_fit(&s, &taus, &scalar, 0.05, &KernelLearnConfig::default()).unwrap();
        assert!(report.objectives.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{:?}", report.objectives);
    }

    #[test]
    fn scalar_structure_absorbs_into_ridge() {
        // p = 1: a model with structure c and ridge lambda is the C = 1 model
        // with ridge lambda / c, since c a = (K + lambda/c I)^{-1} gdot.
        let s = smoother(1);
        let taus = window_times(&s, 9, TauMode::Regular).unwrap();
        let scalar = GaussianKernel::new(0.8).unwrap();
        let ridge = 0.1;
        let cfg = KernelLearnConfig {
            outer_iters: 5,
            ..Default::default()
        };
        let (model, c, _) = alternate_fit(&s, &taus, &scalar, ridge, &cfg).unwrap();
        let cval = c.matrix()[(0, 0)];
        assert!(cval > 0.0);
        // the last a-step used the previous C; refit with the final one
        let refit = crate::matching::fit_ridge(&s, &taus, model.kernel(), ridge).unwrap();
        let unit = crate::matching::fit_ridge(&s, &taus, &OperatorKernel::decomposable(scalar, StructureMatrix::identity(1)), ridge / cval).unwrap();
        for x in [-1.2, -0.4, 0.0, 0.5, 1.1] {
            let x = DVector::from_vec(vec![x]);
            assert_abs_diff_eq!(refit.eval_h(&x).unwrap()[0], unit.eval_h(&x).unwrap()[0], epsilon = 1e-6);
        }
    }

    #[test]
    fn config_errors() {
        let s = smoother(2);
        let scalar = GaussianKernel::new(1.0).unwrap();
        let bad = KernelLearnConfig {
            inner_iters: 0,
            ..Default::default()
        };
        assert!(alternate_fit(&s, &[1.0], &scalar, 0.1, &bad).is_err());
        let wrong_dim = KernelLearnConfig {
            init_c: Some(StructureMatrix::identity(3)),
            ..Default::default()
        };
        assert!(alternate_fit(&s, &[1.0], &scalar, 0.1, &wrong_dim).is_err());
    }
}
