//! The two-step estimator end to end: leave-one-out smoothing, then a grid
//! search over the vector-field kernel width and ridge that minimises the
//! empirical trajectory error against the observations.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::field::VectorField;
use crate::kernel::GaussianKernel;
use crate::matching::{fit_multi, fit_ridge_collocation, window_times, Collocation, MultiModel, MultiSolver, OdeModel, TauMode};
use crate::operator::{KernelFamily, OperatorKernel, StructureMatrix};
use crate::simulate::{
    add_noise, gm_error, integrate_bounded, mean_squared_difference, regular_grid, simulate, smoothing_error, trajectory_error,
    CalciumParams, FhnParams, NoiseMode, NoiseSpec, TrajectoryMode, CALCIUM_HORIZON, CALCIUM_INITIAL, CALCIUM_SUBSTEPS,
};
use crate::smoother::{CvGrid, LooSelection, Smoother};
use crate::sparse::{sparse_path, sparsity_report, SparseConfig, SparseProblem};
use crate::timeseries::TimeSeries;

/// Candidate `(gamma_h, lambda_h)` values for the vector-field kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Step2Grid {
    pub gammas: Vec<f64>,
    pub ridges: Vec<f64>,
}

impl Default for Step2Grid {
    fn default() -> Self {
        let cv = CvGrid::default();
        Self {
            gammas: cv.gammas,
            ridges: cv.lambdas,
        }
    }
}

impl Step2Grid {
    /// Gammas outer, ridges inner.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.gammas
            .iter()
            .flat_map(|&g| self.ridges.iter().map(move |&r| (g, r)))
            .collect()
    }
}

/// Kernel family plus optional structure matrix (identity when omitted).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: KernelFamily,
    pub structure: Option<StructureMatrix>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::Decomposable,
            structure: None,
        }
    }
}

impl ModelSpec {
    pub fn kernel(&self, gamma: f64, p: usize) -> Result<OperatorKernel> {
        let scalar = GaussianKernel::new(gamma)?;
        let structure = match (self.family.needs_structure(), &self.structure) {
            (false, _) => None,
            (true, Some(c)) => {
                check_dim(p, c.dim())?;
                Some(c.clone())
            }
            (true, None) => Some(StructureMatrix::identity(p)),
        };
        OperatorKernel::new(self.family, scalar, structure)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepConfig {
    pub cv_grid: CvGrid,
    pub step2: Step2Grid,
    pub m: usize,
    pub tau_mode: TauMode,
    pub spec: ModelSpec,
    pub substeps: usize,
    pub mode: TrajectoryMode,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        Self {
            cv_grid: CvGrid::default(),
            step2: Step2Grid::default(),
            m: 101,
            tau_mode: TauMode::Regular,
            spec: ModelSpec::default(),
            substeps: 20,
            mode: TrajectoryMode::SelfConsistent,
        }
    }
}

/// Step 1 output and the collocation data shared by all Step 2 candidates.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub smoother: Smoother,
    pub selections: Vec<LooSelection>,
    pub taus: Vec<f64>,
    pub collocation: Collocation,
}

pub fn prepare(ts: &TimeSeries, cfg: &TwoStepConfig) -> Result<Prepared> {
    if ts.len() < 3 {
        return Err(Error::validation("leave-one-out smoothing needs at least 3 observations"));
    }
    let (smoother, selections) = Smoother::fit_cv(ts, &cfg.cv_grid)?;
    let taus = window_times(&smoother, cfg.m, cfg.tau_mode)?;
    let collocation = Collocation::new(&smoother, &taus)?;
    Ok(Prepared {
        smoother,
        selections,
        taus,
        collocation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub gamma: f64,
    pub ridge: f64,
    /// Empirical trajectory error; `+inf` if the reconstruction blew up.
    pub trajectory_error: f64,
}

/// Fits one Step 2 candidate and scores it.
pub fn score_candidate(prep: &Prepared, ts: &TimeSeries, cfg: &TwoStepConfig, gamma: f64, ridge: f64) -> Result<(OdeModel, CandidateScore)> {
    let kernel = cfg.spec.kernel(gamma, ts.dim())?;
    let model = fit_ridge_collocation(&prep.collocation, &kernel, ridge)?;
    let report = trajectory_error(&model, &prep.smoother, ts, cfg.mode, cfg.substeps)?;
    let err = if report.complete() { report.error } else { f64::INFINITY };
    Ok((
        model,
        CandidateScore {
            gamma,
            ridge,
            trajectory_error: err,
        },
    ))
}

/// Index of the lowest finite score; the earliest wins ties.
pub fn choose(scores: &[CandidateScore]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.trajectory_error.is_finite() && best.is_none_or(|b| s.trajectory_error < scores[b].trajectory_error) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Numerical(format!("all {} Step 2 candidates blew up during integration", scores.len())))
}

#[derive(Debug, Clone)]
pub struct TwoStepFit {
    pub prepared: Prepared,
    pub model: OdeModel,
    pub scores: Vec<CandidateScore>,
    pub chosen: usize,
}

impl TwoStepFit {
    pub fn chosen_score(&self) -> &CandidateScore {
        &self.scores[self.chosen]
    }
}

/// Two-step fit, scoring candidates sequentially.
pub fn fit_two_step(ts: &TimeSeries, cfg: &TwoStepConfig) -> Result<TwoStepFit> {
    fit_two_step_with(ts, cfg, |points, score| points.iter().map(|&(g, r)| score(g, r)).collect())
}

type ScoreFn<'a> = dyn Fn(f64, f64) -> Result<CandidateScore> + Sync + 'a;

/// Two-step fit with candidate scoring delegated to `map`, which must
/// return results in the order of the points it is given.
pub fn fit_two_step_with<M>(ts: &TimeSeries, cfg: &TwoStepConfig, map: M) -> Result<TwoStepFit>
where
    M: FnOnce(&[(f64, f64)], &ScoreFn<'_>) -> Vec<Result<CandidateScore>>,
{
    if cfg.substeps == 0 {
        return Err(Error::validation("substeps must be at least 1"));
    }
    let points = cfg.step2.points();
    if points.is_empty() {
        return Err(Error::validation("Step 2 grid is empty"));
    }
    let prepared = prepare(ts, cfg)?;
    let score = |g: f64, r: f64| score_candidate(&prepared, ts, cfg, g, r).map(|(_, s)| s);
    let scores = map(&points, &score).into_iter().collect::<Result<Vec<_>>>()?;
    let chosen = choose(&scores)?;
    let (model, _) = score_candidate(&prepared, ts, cfg, scores[chosen].gamma, scores[chosen].ridge)?;
    Ok(TwoStepFit {
        prepared,
        model,
        scores,
        chosen,
    })
}

/// Flat key-value summary of a fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    pub entries: Vec<(String, String)>,
}

impl FitReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl std::fmt::Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Smoothing, gradient-matching and trajectory errors of `field`.
    #[allow(clippy::too_many_arguments)]
    pub fn add_metrics<F: VectorField + ?Sized>(
        &mut self,
        prefix: &str,
        field: &F,
        smoother: &Smoother,
        ts: &TimeSeries,
        taus: &[f64],
        mode: TrajectoryMode,
        substeps: usize,
    ) -> Result<()> {
        self.push(format!("{prefix}smoothing_error"), smoothing_error(smoother, ts)?);
        self.push(format!("{prefix}gm_error"), gm_error(field, smoother, taus));
        let traj = trajectory_error(field, smoother, ts, mode, substeps)?;
        self.push(format!("{prefix}trajectory_error"), traj.error);
        self.push(format!("{prefix}trajectory_mse"), traj.mse());
        self.push(format!("{prefix}trajectory_points"), traj.reached);
        if let Some(t) = traj.failed_at {
            self.push(format!("{prefix}blow_up_time"), t);
        }
        Ok(())
    }

    pub fn add_selections(&mut self, prefix: &str, selections: &[LooSelection]) {
        for (j, s) in selections.iter().enumerate() {
            self.push(format!("{prefix}smoother_gamma_{}", j + 1), s.gamma);
            self.push(format!("{prefix}smoother_lambda_{}", j + 1), s.lambda);
            self.push(format!("{prefix}smoother_loo_{}", j + 1), s.loo_error);
        }
    }

    pub fn add_sparsity(&mut self, model: &OdeModel, tol: f64) {
        let r = sparsity_report(model, tol);
        self.push("zero_coeffs", r.zero_coeffs);
        self.push("zero_groups", r.zero_groups);
        self.push("zero_coeff_fraction", r.coeff_fraction);
        self.push("zero_group_fraction", r.group_fraction);
    }
}

/// Report for a single-series two-step fit.
pub fn report_two_step(fit: &TwoStepFit, ts: &TimeSeries, cfg: &TwoStepConfig) -> Result<FitReport> {
    let mut r = FitReport::default();
    r.push("family", cfg.spec.family);
    r.push("m", fit.model.len());
    r.push("gamma_h", fit.chosen_score().gamma);
    r.push("lambda_h", fit.chosen_score().ridge);
    r.add_selections("", &fit.prepared.selections);
    r.add_metrics("", &fit.model, &fit.prepared.smoother, ts, &fit.prepared.taus, cfg.mode, cfg.substeps)?;
    Ok(r)
}

/// Step 1 per series and the shared collocation times.
pub fn prepare_multi(series: &[TimeSeries], cfg: &TwoStepConfig) -> Result<Vec<Prepared>> {
    if series.is_empty() {
        return Err(Error::validation("need at least one series"));
    }
    let first = prepare(&series[0], cfg)?;
    let taus = first.taus.clone();
    let mut out = vec![first];
    for ts in &series[1..] {
        check_dim(series[0].dim(), ts.dim())?;
        let (smoother, selections) = Smoother::fit_cv(ts, &cfg.cv_grid)?;
        let collocation = Collocation::new(&smoother, &taus)?;
        out.push(Prepared {
            smoother,
            selections,
            taus: taus.clone(),
            collocation,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MultiFit {
    pub prepared: Vec<Prepared>,
    pub model: MultiModel,
    pub scores: Vec<CandidateScore>,
    pub chosen: usize,
}

/// Sum over series of the consensus model's trajectory error.
fn score_multi(
    prepared: &[Prepared],
    series: &[TimeSeries],
    cfg: &TwoStepConfig,
    sim_weight: f64,
    solver: MultiSolver,
    gamma: f64,
    ridge: f64,
) -> Result<(MultiModel, CandidateScore)> {
    let kernel = cfg.spec.kernel(gamma, series[0].dim())?;
    let smoothers: Vec<Smoother> = prepared.iter().map(|p| p.smoother.clone()).collect();
    let mm = fit_multi(&smoothers, &prepared[0].taus, &kernel, ridge, sim_weight, solver)?;
    let mut total = 0.0;
    for (p, ts) in prepared.iter().zip(series) {
        let r = trajectory_error(&mm.consensus(), &p.smoother, ts, cfg.mode, cfg.substeps)?;
        total += if r.complete() { r.error } else { f64::INFINITY };
    }
    Ok((
        mm,
        CandidateScore {
            gamma,
            ridge,
            trajectory_error: total,
        },
    ))
}

/// Multi-series fit with the Step 2 grid scored by the consensus model.
pub fn fit_multi_two_step<M>(series: &[TimeSeries], cfg: &TwoStepConfig, sim_weight: f64, solver: MultiSolver, map: M) -> Result<MultiFit>
where
    M: FnOnce(&[(f64, f64)], &ScoreFn<'_>) -> Vec<Result<CandidateScore>>,
{
    let prepared = prepare_multi(series, cfg)?;
    let points = cfg.step2.points();
    if points.is_empty() {
        return Err(Error::validation("Step 2 grid is empty"));
    }
    let score = |g: f64, r: f64| score_multi(&prepared, series, cfg, sim_weight, solver, g, r).map(|(_, s)| s);
    let scores = map(&points, &score).into_iter().collect::<Result<Vec<_>>>()?;
    let chosen = choose(&scores)?;
    let (model, _) = score_multi(&prepared, series, cfg, sim_weight, solver, scores[chosen].gamma, scores[chosen].ridge)?;
    Ok(MultiFit {
        prepared,
        model,
        scores,
        chosen,
    })
}

/// One row of a sparsity sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub lambda1: f64,
    pub score: f64,
    pub zero_coeff_fraction: f64,
    pub zero_group_fraction: f64,
    pub converged: bool,
}

/// Sparse fits over `alphas x lambda1s`. At each `alpha` the `lambda1`
/// values are visited in increasing order with warm starts; `score` rates
/// each fitted model (e.g. a trajectory error).
pub fn sweep_alpha(
    problem: &SparseProblem,
    alphas: &[f64],
    lambda1s: &[f64],
    base: &SparseConfig,
    zero_tol: f64,
    mut score: impl FnMut(&OdeModel) -> f64,
) -> Result<Vec<SweepRow>> {
    let mut lambdas = lambda1s.to_vec();
    lambdas.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(alphas.len() * lambdas.len());
    for &alpha in alphas {
        let cfg = SparseConfig { alpha, ..*base };
        for (lambda1, (a, diag)) in lambdas.iter().zip(sparse_path(problem, &cfg, &lambdas)?) {
            let model = problem.to_model(&a)?;
            let rep = sparsity_report(&model, zero_tol);
            rows.push(SweepRow {
                alpha,
                lambda1: *lambda1,
                score: score(&model),
                zero_coeff_fraction: rep.coeff_fraction,
                zero_group_fraction: rep.group_fraction,
                converged: diag.converged,
            });
        }
    }
    Ok(rows)
}

/// MSE between the trajectory of `field` from `x0` and a reference series;
/// `+inf` on blow-up.
pub fn reference_mse<F: VectorField + ?Sized>(field: &F, x0: &DVector<f64>, reference: &TimeSeries, substeps: usize) -> Result<f64> {
    check_dim(reference.dim(), x0.len())?;
    let traj = integrate_bounded(field, x0, reference.times(), substeps, f64::INFINITY)?;
    if traj.failed_at.is_some() {
        return Ok(f64::INFINITY);
    }
    mean_squared_difference(&traj.to_matrix(), reference.values())
}

/// Noisy samples of a planar FHN trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhnBenchmark {
    pub params: FhnParams,
    pub x0: [f64; 2],
    pub horizon: f64,
    pub n: usize,
    pub variance: f64,
    pub seed: u64,
    pub substeps: usize,
}

impl Default for FhnBenchmark {
    fn default() -> Self {
        Self {
            params: FhnParams::default(),
            x0: [-1.0, 1.0],
            horizon: 20.0,
            n: 41,
            variance: 0.1,
            seed: 1,
            substeps: 20,
        }
    }
}

impl FhnBenchmark {
    /// `(noiseless, noisy)` series on `n` regular points of `[0, horizon]`.
    pub fn generate(&self) -> Result<(TimeSeries, TimeSeries)> {
        let grid = regular_grid(0.0, self.horizon, self.n)?;
        let truth = simulate(&self.params, &DVector::from_row_slice(&self.x0), &grid, self.substeps)?;
        let noisy = add_noise(
            &truth,
            &NoiseSpec {
                variance: self.variance,
                mode: NoiseMode::Gaussian,
                seed: self.seed,
            },
        )?;
        Ok((truth, noisy))
    }
}

/// Noisy samples of the calcium oscillator with clamped noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalciumBenchmark {
    pub params: CalciumParams,
    pub x0: [f64; 4],
    pub horizon: f64,
    pub n: usize,
    pub variance: f64,
    pub seed: u64,
    pub substeps: usize,
}

impl Default for CalciumBenchmark {
    fn default() -> Self {
        Self {
            params: CalciumParams::default(),
            x0: CALCIUM_INITIAL,
            horizon: CALCIUM_HORIZON,
            n: 67,
            variance: 0.1,
            seed: 1,
            substeps: CALCIUM_SUBSTEPS,
        }
    }
}

impl CalciumBenchmark {
    pub fn generate(&self) -> Result<(TimeSeries, TimeSeries)> {
        let grid = regular_grid(0.0, self.horizon, self.n)?;
        let truth = simulate(&self.params, &DVector::from_row_slice(&self.x0), &grid, self.substeps)?;
        let noisy = add_noise(
            &truth,
            &NoiseSpec {
                variance: self.variance,
                mode: NoiseMode::ZeroTruncated,
                seed: self.seed,
            },
        )?;
        Ok((truth, noisy))
    }
}
