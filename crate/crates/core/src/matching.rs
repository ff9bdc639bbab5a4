//! Gradient matching: learning the vector field `h` from a fitted smoother.
//!
//! Given collocation times `tau_1..tau_m`, the anchors are `g(tau_l)` and the
//! targets `g'(tau_l)`. The ridge solution is the kernel expansion
//! `h(x) = sum_l K(x, g(tau_l)) a_l` with stacked coefficients
//! `a = (K + lambda_h I)^{-1} gdot`, where `K` is the block Gram matrix of
//! the anchors.
//!
//! With `r` trajectories from different initial conditions, each series gets
//! its own model `h^i` and a coupling penalty pulls the models together. The
//! quadratic objective in the stacked coefficients is
//!
//! ```text
//! 1/2 |gdot - D a|^2 + lambda_h/2 a' D a + lambda_sim/2 a' (r D - Kfull) a
//! ```
//!
//! with `Kfull` the `r x r` block matrix of cross-series Gram matrices and
//! `D` its block diagonal.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::field::VectorField;
use crate::linalg::{solve_spd, stack, unstack};
use crate::operator::{block_gram, cross_block_gram, OperatorKernel};
use crate::smoother::Smoother;

/// How collocation times are placed in the window `(0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    /// `T l / m` for `l = 1..m`.
    Regular,
    /// Sorted i.i.d. uniform draws from a seeded generator.
    UniformRandom { seed: u64 },
}

pub fn sample_times(m: usize, horizon: f64, mode: TauMode) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::validation("need at least one collocation time"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::validation(format!("horizon must be positive, got {horizon}")));
    }
    Ok(match mode {
        TauMode::Regular => (1..=m).map(|l| horizon * l as f64 / m as f64).collect(),
        TauMode::UniformRandom { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut taus: Vec<f64> = (0..m).map(|_| horizon * (1.0 - rng.random::<f64>())).collect();
            taus.sort_by(f64::total_cmp);
            taus
        }
    })
}

/// Collocation times spanning a smoother's training window `(t_0, t_{n-1}]`.
pub fn window_times(smoother: &Smoother, m: usize, mode: TauMode) -> Result<Vec<f64>> {
    let times = smoother.times();
    let start = times[0];
    let end = times[times.len() - 1];
    Ok(sample_times(m, end - start, mode)?.into_iter().map(|t| start + t).collect())
}

/// Anchors `g(tau_l)` and stacked targets `g'(tau_l)`.
#[derive(Debug, Clone)]
pub struct Collocation {
    pub taus: Vec<f64>,
    pub anchors: Vec<DVector<f64>>,
    pub gdot: DVector<f64>,
}

impl Collocation {
    pub fn new(smoother: &Smoother, taus: &[f64]) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::validation("need at least one collocation time"));
        }
        let anchors: Vec<_> = taus.iter().map(|&t| smoother.eval_g(t)).collect();
        let targets: Vec<_> = taus.iter().map(|&t| smoother.eval_gdot(t)).collect();
        Ok(Self {
            taus: taus.to_vec(),
            anchors,
            gdot: stack(&targets),
        })
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// A learned vector field `h(x) = sum_l K(x, anchor_l) a_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeModel {
    kernel: OperatorKernel,
    anchors: Vec<DVector<f64>>,
    coeffs: Vec<DVector<f64>>,
    ridge: f64,
}

impl OdeModel {
    pub fn new(kernel: OperatorKernel, anchors: Vec<DVector<f64>>, coeffs: Vec<DVector<f64>>, ridge: f64) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::validation("a model needs at least one anchor"));
        }
        check_dim(anchors.len(), coeffs.len())?;
        let p = anchors[0].len();
        for v in anchors.iter().chain(&coeffs) {
            check_dim(p, v.len())?;
        }
        if let Some(c) = kernel.structure() {
            check_dim(c.dim(), p)?;
        }
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::validation(format!("lambda_h must be positive, got {ridge}")));
        }
        Ok(Self {
            kernel,
            anchors,
            coeffs,
            ridge,
        })
    }

    pub(crate) fn from_stacked(kernel: OperatorKernel, anchors: Vec<DVector<f64>>, a: &DVector<f64>, ridge: f64) -> Result<Self> {
        let p = anchors[0].len();
        Self::new(kernel, anchors, unstack(a, p), ridge)
    }

    /// `h(x)`.
    pub fn eval_h(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.apply(x))
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (anchor, a) in self.anchors.iter().zip(&self.coeffs) {
            self.kernel
                .apply_block(x.as_slice(), anchor.as_slice(), a.as_slice(), out.as_mut_slice());
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    /// Number of anchors `m`.
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn kernel(&self) -> &OperatorKernel {
        &self.kernel
    }

    pub fn anchors(&self) -> &[DVector<f64>] {
        &self.anchors
    }

    pub fn coeffs(&self) -> &[DVector<f64>] {
        &self.coeffs
    }

    pub fn stacked_coeffs(&self) -> DVector<f64> {
        stack(&self.coeffs)
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// RKHS norm `|h|^2 = a' K a`.
    pub fn norm_squared(&self) -> Result<f64> {
        let k = block_gram(&self.kernel, &self.anchors)?;
        let a = self.stacked_coeffs();
        Ok(a.dot(&(k * &a)))
    }
}

impl VectorField for OdeModel {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply(x)
    }
}

/// Ridge solution on prepared anchors and targets.
pub fn fit_ridge_collocation(col: &Collocation, kernel: &OperatorKernel, ridge: f64) -> Result<OdeModel> {
    check_ridge(ridge)?;
    let mut system = block_gram(kernel, &col.anchors)?;
    for i in 0..system.nrows() {
        system[(i, i)] += ridge;
    }
    let a = solve_spd(&system, &col.gdot)?;
    OdeModel::from_stacked(kernel.clone(), col.anchors.clone(), &a, ridge)
}

/// Closed-form gradient matching `a = (K + lambda_h I)^{-1} gdot`.
pub fn fit_ridge(smoother: &Smoother, taus: &[f64], kernel: &OperatorKernel, ridge: f64) -> Result<OdeModel> {
    fit_ridge_collocation(&Collocation::new(smoother, taus)?, kernel, ridge)
}

fn check_ridge(ridge: f64) -> Result<()> {
    if ridge > 0.0 && ridge.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "lambda_h must be positive (the system is singular otherwise), got {ridge}"
        )))
    }
}

/// `r` coupled models sharing one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModel {
    models: Vec<OdeModel>,
    sim_weight: f64,
}

impl MultiModel {
    pub fn new(models: Vec<OdeModel>, sim_weight: f64) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::validation("a multi-model needs at least one member"))?;
        if models.iter().any(|m| m.kernel != first.kernel || m.dim() != first.dim()) {
            return Err(Error::validation("all member models must share kernel and dimension"));
        }
        if !(sim_weight >= 0.0) {
            return Err(Error::validation("lambda_sim must be non-negative"));
        }
        Ok(Self { models, sim_weight })
    }

    pub fn models(&self) -> &[OdeModel] {
        &self.models
    }

    pub fn sim_weight(&self) -> f64 {
        self.sim_weight
    }

    /// The averaged field `(1/r) sum_i h^i`.
    pub fn consensus(&self) -> Consensus<'_> {
        Consensus { models: &self.models }
    }

    /// `|h^i - h^j|^2` in the RKHS.
    pub fn distance_squared(&self, i: usize, j: usize) -> Result<f64> {
        let (mi, mj) = (&self.models[i], &self.models[j]);
        let kernel = mi.kernel();
        let (ai, aj) = (mi.stacked_coeffs(), mj.stacked_coeffs());
        let kii = block_gram(kernel, mi.anchors())?;
        let kjj = block_gram(kernel, mj.anchors())?;
        let kij = cross_block_gram(kernel, mi.anchors(), mj.anchors())?;
        Ok(ai.dot(&(kii * &ai)) + aj.dot(&(kjj * &aj)) - 2.0 * ai.dot(&(kij * &aj)))
    }
}

/// Pointwise average of a set of models.
#[derive(Debug, Clone, Copy)]
pub struct Consensus<'a> {
    models: &'a [OdeModel],
}

impl<'a> Consensus<'a> {
    pub fn new(models: &'a [OdeModel]) -> Self {
        Self { models }
    }

    pub fn eval_h(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut sum = DVector::zeros(x.len());
        for m in self.models {
            sum += m.eval_h(x)?;
        }
        Ok(sum / self.models.len() as f64)
    }
}

impl VectorField for Consensus<'_> {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut sum = DVector::zeros(x.len());
        for m in self.models {
            sum += m.apply(x);
        }
        sum / self.models.len() as f64
    }
}

/// Stochastic block-coordinate descent with iterate averaging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    /// Coefficients updated per step.
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            batch: 10,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MultiSolver {
    Direct,
    Sgd(SgdConfig),
}

/// The coupled quadratic problem over all `r` series.
#[derive(Debug, Clone)]
pub struct MultiProblem {
    kernel: OperatorKernel,
    collocations: Vec<Collocation>,
    offsets: Vec<usize>,
    full: DMatrix<f64>,
    gdot: DVector<f64>,
    ridge: f64,
    sim_weight: f64,
}

impl MultiProblem {
    pub fn new(smoothers: &[Smoother], taus: &[f64], kernel: &OperatorKernel, ridge: f64, sim_weight: f64) -> Result<Self> {
        let cols = smoothers
            .iter()
            .map(|s| Collocation::new(s, taus))
            .collect::<Result<Vec<_>>>()?;
        Self::from_collocations(cols, kernel, ridge, sim_weight)
    }

    pub fn from_collocations(collocations: Vec<Collocation>, kernel: &OperatorKernel, ridge: f64, sim_weight: f64) -> Result<Self> {
        if collocations.is_empty() {
            return Err(Error::validation("need at least one series"));
        }
        check_ridge(ridge)?;
        if !(sim_weight >= 0.0 && sim_weight.is_finite()) {
            return Err(Error::validation(format!("lambda_sim must be non-negative, got {sim_weight}")));
        }
        let p = collocations[0].dim();
        for c in &collocations {
            check_dim(p, c.dim())?;
        }
        let mut offsets = vec![0];
        for c in &collocations {
            offsets.push(offsets.last().unwrap() + c.len() * p);
        }
        let n = *offsets.last().unwrap();
        let mut full = DMatrix::zeros(n, n);
        for (i, ci) in collocations.iter().enumerate() {
            for (j, cj) in collocations.iter().enumerate().skip(i) {
                let block = cross_block_gram(kernel, &ci.anchors, &cj.anchors)?;
                full.view_mut((offsets[i], offsets[j]), block.shape()).copy_from(&block);
                if i != j {
                    full.view_mut((offsets[j], offsets[i]), (block.ncols(), block.nrows()))
                        .copy_from(&block.transpose());
                }
            }
        }
        let gdot = stack(&collocations.iter().map(|c| c.gdot.clone()).collect::<Vec<_>>());
        Ok(Self {
            kernel: kernel.clone(),
            collocations,
            offsets,
            full,
            gdot,
            ridge,
            sim_weight,
        })
    }

    pub fn series_count(&self) -> usize {
        self.collocations.len()
    }

    /// Total number of stacked coefficients.
    pub fn size(&self) -> usize {
        self.gdot.len()
    }

    /// The full cross-series Gram matrix.
    pub fn full_gram(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn block_diagonal(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.size(), self.size());
        for i in 0..self.series_count() {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            d.view_mut((lo, lo), (hi - lo, hi - lo))
                .copy_from(&self.full.view((lo, lo), (hi - lo, hi - lo)));
        }
        d
    }

    pub fn gdot(&self) -> &DVector<f64> {
        &self.gdot
    }

    fn coupling(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        d * self.series_count() as f64 - &self.full
    }

    pub fn objective(&self, a: &DVector<f64>) -> f64 {
        let d = self.block_diagonal();
        let da = &d * a;
        0.5 * (&self.gdot - &da).norm_squared()
            + 0.5 * self.ridge * a.dot(&da)
            + 0.5 * self.sim_weight * a.dot(&(self.coupling(&d) * a))
    }

    /// Stationarity system `(D^2 + lambda_h D + lambda_sim (r D - Kfull)) a = D gdot`.
    pub fn system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.block_diagonal();
        let mut m = &d * &d + &d * self.ridge + self.coupling(&d) * self.sim_weight;
        // exact symmetry for the Cholesky factorisation
        m = crate::linalg::symmetrize(&m);
        let rhs = &d * &self.gdot;
        (m, rhs)
    }

    pub fn solve_direct(&self) -> Result<DVector<f64>> {
        let (m, rhs) = self.system();
        solve_spd(&m, &rhs)
    }

    /// Independent per-series ridge solutions, stacked.
    pub fn decoupled_solution(&self) -> Result<DVector<f64>> {
        let parts = self
            .collocations
            .iter()
            .map(|c| fit_ridge_collocation(c, &self.kernel, self.ridge).map(|m| m.stacked_coeffs()))
            .collect::<Result<Vec<_>>>()?;
        Ok(stack(&parts))
    }

    /// Averaged stochastic block-coordinate descent on the stationarity
    /// system, warm-started from the decoupled ridge solutions. The step is
    /// `1/L` with `L` the Frobenius norm of the system matrix; averaging
    /// starts after the first epoch.
    pub fn solve_sgd(&self, cfg: &SgdConfig) -> Result<DVector<f64>> {
        if cfg.batch == 0 || cfg.epochs == 0 {
            return Err(Error::validation("SGD batch size and epoch count must be positive"));
        }
        let (m, rhs) = self.system();
        let lipschitz = m.norm();
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::Numerical("degenerate multi-series system".into()));
        }
        let step = 1.0 / lipschitz;
        let n = self.size();
        let mut a = self.decoupled_solution()?;
        let mut avg = DVector::zeros(n);
        let mut averaged = 0usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch) {
                let grads: Vec<f64> = batch
                    .iter()
                    .map(|&i| m.row(i).transpose().dot(&a) - rhs[i])
                    .collect();
                for (&i, g) in batch.iter().zip(grads) {
                    a[i] -= step * g;
                }
                if epoch > 0 {
                    averaged += 1;
                    avg += (&a - &avg) / averaged as f64;
                }
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("SGD produced non-finite iterate in epoch {epoch}")));
            }
        }
        Ok(if averaged > 0 { avg } else { a })
    }

    pub fn into_model(&self, a: &DVector<f64>) -> Result<MultiModel> {
        let models = self
            .collocations
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let part = a.rows(self.offsets[i], self.offsets[i + 1] - self.offsets[i]).into_owned();
                OdeModel::from_stacked(self.kernel.clone(), c.anchors.clone(), &part, self.ridge)
            })
            .collect::<Result<Vec<_>>>()?;
        MultiModel::new(models, self.sim_weight)
    }
}

/// Fits `r` coupled models, one per smoother, on shared collocation times.
pub fn fit_multi(
    smoothers: &[Smoother],
    taus: &[f64],
    kernel: &OperatorKernel,
    ridge: f64,
    sim_weight: f64,
    solver: MultiSolver,
) -> Result<MultiModel> {
    let problem = MultiProblem::new(smoothers, taus, kernel, ridge, sim_weight)?;
    let a = match solver {
        MultiSolver::Direct => problem.solve_direct()?,
        MultiSolver::Sgd(cfg) => problem.solve_sgd(&cfg)?,
    };
    problem.into_model(&a)
}
