//! Sparse gradient matching with an elastic mix of lasso and group lasso.
//!
//! Objective over the stacked coefficients `a` (m groups of size p):
//!
//! ```text
//! 1/2 |gdot - K a|^2 + lambda_h/2 a' K a
//!     + lambda_1 alpha |a|_1 + lambda_1 (1 - alpha) sum_l |a_l|_2
//! ```
//!
//! `alpha = 1` is a pure lasso, `alpha = 0` a pure group lasso. Solved by
//! FISTA started from the ridge solution.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::matching::{fit_ridge_collocation, Collocation, OdeModel};
use crate::operator::{block_gram, OperatorKernel};
use crate::smoother::Smoother;

/// A partition of coefficient indices into contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Groups {
    ranges: Vec<Range<usize>>,
    len: usize,
}

impl Groups {
    /// `m` consecutive blocks of size `p`.
    pub fn blocks(m: usize, p: usize) -> Result<Self> {
        Self::new((0..m).map(|l| l * p..(l + 1) * p).collect())
    }

    /// Ranges must be non-empty and tile `0..len` in order.
    pub fn new(ranges: Vec<Range<usize>>) -> Result<Self> {
        let mut at = 0;
        for r in &ranges {
            if r.is_empty() {
                return Err(Error::Config("empty coefficient group".into()));
            }
            if r.start != at {
                return Err(Error::Config(format!("groups must tile the index range; gap or overlap at {at}")));
            }
            at = r.end;
        }
        if ranges.is_empty() {
            return Err(Error::Config("no coefficient groups".into()));
        }
        Ok(Self { ranges, len: at })
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// Total number of indices covered.
    pub fn total_len(&self) -> usize {
        self.len
    }

    pub fn count(&self) -> usize {
        self.ranges.len()
    }

    pub fn count_zero(&self, a: &DVector<f64>, tol: f64) -> usize {
        self.ranges
            .iter()
            .filter(|r| a.as_slice()[r.start..r.end].iter().all(|v| v.abs() < tol))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseConfig {
    pub lambda1: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            alpha: 0.5,
            max_iters: 5000,
            tol: 1e-9,
        }
    }
}

impl SparseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be non-negative, got {}", self.lambda1)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Elementwise soft thresholding.
pub fn prox_l1(u: &DVector<f64>, mu: f64) -> DVector<f64> {
    u.map(|v| v.signum() * (v.abs() - mu).max(0.0))
}

/// Blockwise shrinkage `(1 - mu/|u_I|)_+ u_I`.
pub fn prox_group(u: &DVector<f64>, mu: f64, groups: &Groups) -> Result<DVector<f64>> {
    check_dim(groups.total_len(), u.len())?;
    let mut out = u.clone();
    for r in groups.ranges() {
        let mut block = out.rows_mut(r.start, r.len());
        let norm = block.norm();
        let factor = if norm > mu { 1.0 - mu / norm } else { 0.0 };
        block *= factor;
    }
    Ok(out)
}

/// Prox of `lambda alpha |.|_1 + lambda (1 - alpha) sum |.|_2`: soft
/// thresholding followed by group shrinkage.
pub fn prox_sparse_group(u: &DVector<f64>, lambda: f64, alpha: f64, groups: &Groups) -> Result<DVector<f64>> {
    prox_group(&prox_l1(u, lambda * alpha), lambda * (1.0 - alpha), groups)
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub step: f64,
    pub zero_groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub lipschitz: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub trace: Vec<IterRecord>,
}

impl SparseDiagnostics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,objective,step,zero_groups\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{},{},{}", r.iter, r.objective, r.step, r.zero_groups);
        }
        s
    }
}

/// Fixed data for the sparse objective.
#[derive(Debug, Clone)]
pub struct SparseProblem {
    kernel: OperatorKernel,
    col: Collocation,
    gram: DMatrix<f64>,
    ridge: f64,
    groups: Groups,
    lipschitz: f64,
}

/// Blocks with all entries below this are counted as zero in the trace.
const ZERO_TOL: f64 = 1e-8;

impl SparseProblem {
    pub fn new(col: Collocation, kernel: &OperatorKernel, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::validation(format!("lambda_h must be positive, got {ridge}")));
        }
        let gram = block_gram(kernel, &col.anchors)?;
        let mut shifted = gram.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += ridge;
        }
        let lipschitz = (&gram * shifted).norm();
        let groups = Groups::blocks(col.len(), col.dim())?;
        Ok(Self {
            kernel: kernel.clone(),
            col,
            gram,
            ridge,
            groups,
            lipschitz,
        })
    }

    pub fn from_smoother(smoother: &Smoother, taus: &[f64], kernel: &OperatorKernel, ridge: f64) -> Result<Self> {
        Self::new(Collocation::new(smoother, taus)?, kernel, ridge)
    }

    /// Frobenius norm of the Hessian `K (K + lambda_h I)` of the smooth part.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn groups(&self) -> &Groups {
        &self.groups
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn smooth(&self, a: &DVector<f64>) -> f64 {
        let ka = &self.gram * a;
        0.5 * (&self.col.gdot - &ka).norm_squared() + 0.5 * self.ridge * a.dot(&ka)
    }

    pub fn penalty(&self, a: &DVector<f64>, cfg: &SparseConfig) -> f64 {
        let l1: f64 = a.iter().map(|v| v.abs()).sum();
        let grp: f64 = self
            .groups
            .ranges()
            .iter()
            .map(|r| a.rows(r.start, r.len()).norm())
            .sum();
        cfg.lambda1 * (cfg.alpha * l1 + (1.0 - cfg.alpha) * grp)
    }

    pub fn objective(&self, a: &DVector<f64>, cfg: &SparseConfig) -> f64 {
        self.smooth(a) + self.penalty(a, cfg)
    }

    /// `K ((K + lambda_h I) a - gdot)`.
    pub fn gradient(&self, a: &DVector<f64>) -> DVector<f64> {
        let r = &self.gram * a + a * self.ridge - &self.col.gdot;
        &self.gram * r
    }

    pub fn ridge_solution(&self) -> Result<DVector<f64>> {
        Ok(fit_ridge_collocation(&self.col, &self.kernel, self.ridge)?.stacked_coeffs())
    }

    fn prox_step(&self, y: &DVector<f64>, cfg: &SparseConfig) -> DVector<f64> {
        let step = 1.0 / self.lipschitz;
        let v = y - self.gradient(y) * step;
        prox_sparse_group(&v, cfg.lambda1 * step, cfg.alpha, &self.groups).expect("groups match problem size")
    }

    /// FISTA from `init` (the ridge solution when `None`). Returns the
    /// iterate with the lowest objective seen.
    pub fn solve(&self, cfg: &SparseConfig, init: Option<&DVector<f64>>, trace: bool) -> Result<(DVector<f64>, SparseDiagnostics)> {
        cfg.validate()?;
        let start = match init {
            Some(a) => {
                check_dim(self.groups.total_len(), a.len())?;
                a.clone()
            }
            None => self.ridge_solution()?,
        };
        let initial_objective = self.objective(&start, cfg);
        let mut diag = SparseDiagnostics {
            iterations: 0,
            converged: false,
            lipschitz: self.lipschitz,
            initial_objective,
            final_objective: initial_objective,
            trace: Vec::new(),
        };
        if self.lipschitz == 0.0 {
            // K = 0: the smooth part is constant, the prox of the penalty at 0 is 0
            let zero = DVector::zeros(start.len());
            diag.final_objective = self.objective(&zero, cfg).min(initial_objective);
            diag.converged = true;
            let best = if self.objective(&zero, cfg) <= initial_objective { zero } else { start };
            return Ok((best, diag));
        }
        let step = 1.0 / self.lipschitz;
        let mut x = start.clone();
        let mut y = start.clone();
        let mut t = 1.0f64;
        let mut prev = initial_objective;
        let mut best = start;
        let mut best_obj = initial_objective;
        for iter in 1..=cfg.max_iters {
            let next = self.prox_step(&y, cfg);
            let obj = self.objective(&next, cfg);
            if !obj.is_finite() {
                return Err(Error::Divergence(format!("non-finite objective at iteration {iter}")));
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            x = next;
            t = t_next;
            if obj < best_obj {
                best_obj = obj;
                best = x.clone();
            }
            if trace {
                diag.trace.push(IterRecord {
                    iter,
                    objective: obj,
                    step,
                    zero_groups: self.groups.count_zero(&x, ZERO_TOL),
                });
            }
            diag.iterations = iter;
            let change = (prev - obj).abs() / prev.abs().max(f64::MIN_POSITIVE);
            prev = obj;
            if change < cfg.tol {
                diag.converged = true;
                break;
            }
        }
        diag.final_objective = best_obj;
        Ok((best, diag))
    }

    /// Plain proximal gradient (no momentum) for `iters` steps.
    pub fn solve_unaccelerated(&self, cfg: &SparseConfig, init: &DVector<f64>, iters: usize) -> DVector<f64> {
        let mut x = init.clone();
        for _ in 0..iters {
            x = self.prox_step(&x, cfg);
        }
        x
    }

    pub fn to_model(&self, a: &DVector<f64>) -> Result<OdeModel> {
        OdeModel::from_stacked(self.kernel.clone(), self.col.anchors.clone(), a, self.ridge)
    }
}

/// Sparse gradient matching. Returns the model and the solver diagnostics.
pub fn fit_sparse(
    smoother: &Smoother,
    taus: &[f64],
    kernel: &OperatorKernel,
    ridge: f64,
    cfg: &SparseConfig,
) -> Result<(OdeModel, SparseDiagnostics)> {
    let problem = SparseProblem::from_smoother(smoother, taus, kernel, ridge)?;
    let (a, diag) = problem.solve(cfg, None, true)?;
    Ok((problem.to_model(&a)?, diag))
}

/// Solves along increasing `lambda1` values, warm-starting each solve from
/// the previous solution.
pub fn sparse_path(problem: &SparseProblem, base: &SparseConfig, lambdas: &[f64]) -> Result<Vec<(DVector<f64>, SparseDiagnostics)>> {
    let mut out: Vec<(DVector<f64>, SparseDiagnostics)> = Vec::with_capacity(lambdas.len());
    for &lambda1 in lambdas {
        let cfg = SparseConfig { lambda1, ..*base };
        let init = out.last().map(|(a, _)| a.clone());
        out.push(problem.solve(&cfg, init.as_ref(), false)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityReport {
    pub zero_coeffs: usize,
    pub zero_groups: usize,
    pub coeff_fraction: f64,
    pub group_fraction: f64,
}

pub fn sparsity_report(model: &OdeModel, tol: f64) -> SparsityReport {
    let zero_coeffs = model
        .coeffs()
        .iter()
        .flat_map(|a| a.iter())
        .filter(|v| v.abs() < tol)
        .count();
    let zero_groups = model
        .coeffs()
        .iter()
        .filter(|a| a.iter().all(|v| v.abs() < tol))
        .count();
    let total = model.len() * model.dim();
    SparsityReport {
        zero_coeffs,
        zero_groups,
        coeff_fraction: zero_coeffs as f64 / total as f64,
        group_fraction: zero_groups as f64 / model.len() as f64,
    }
}
