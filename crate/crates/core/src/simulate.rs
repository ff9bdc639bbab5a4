//! Ground-truth systems, RK4 integration, observation noise and the error
//! metrics used to score fitted models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::field::VectorField;
use crate::kv::take_numbers;
use crate::smoother::Smoother;
use crate::timeseries::TimeSeries;

/// FitzHugh-Nagumo `V' = c (V - V^3/3 + R)`, `R' = -(V - a + b R) / c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhnParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self { a: 0.2, b: 0.2, c: 3.0 }
    }
}

impl FhnParams {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if ![a, b, c].iter().all(|v| v.is_finite()) {
            return Err(Error::validation("FHN parameters must be finite"));
        }
        if c == 0.0 {
            return Err(Error::validation("FHN parameter c must be nonzero"));
        }
        Ok(Self { a, b, c })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v = take_numbers(text, &["a", "b", "c"])?;
        Self::new(v[0], v[1], v[2])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!("a = {}\nb = {}\nc = {}\n", self.a, self.b, self.c)
    }

    fn rhs(&self, v: f64, r: f64) -> [f64; 2] {
        [self.c * (v - v * v * v / 3.0 + r), -(v - self.a + self.b * r) / self.c]
    }
}

impl VectorField for FhnParams {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_row_slice(&self.rhs(x[0], x[1]))
    }
}

pub fn fhn_rhs(p: &FhnParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(2, x.len())?;
    Ok(p.eval(x))
}

/// Four-variable calcium oscillator with Michaelis terms `R_i(x) = x / (x + Km_i)`.
///
/// State order: `G_alpha`, `P_C`, `Ca_cyt`, `Ca_er`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalciumParams {
    pub k: [f64; 11],
    pub km: [f64; 6],
}

/// Default state at `t = 0` for [`CalciumParams::default`].
pub const CALCIUM_INITIAL: [f64; 4] = [0.12, 0.31, 0.0058, 4.3];

/// Observation window used with the default parameters; covers about three
/// oscillation periods.
pub const CALCIUM_HORIZON: f64 = 30.0;

/// RK4 substeps per observation interval for the calcium system, which is
/// stiff near `Ca_cyt = 0`.
pub const CALCIUM_SUBSTEPS: usize = 400;

impl Default for CalciumParams {
    /// Values chosen to give sustained oscillations from [`CALCIUM_INITIAL`].
    fn default() -> Self {
        Self {
            k: [0.09, 2.0, 1.27, 3.73, 1.27, 32.24, 2.0, 0.05, 13.58, 153.0, 4.85],
            km: [0.19, 0.73, 29.09, 2.67, 0.16, 0.05],
        }
    }
}

const CALCIUM_KEYS: [&str; 17] = [
    "k1", "k2", "k3", "k4", "k5", "k6", "k7", "k8", "k9", "k10", "k11", "km1", "km2", "km3", "km4", "km5", "km6",
];

impl CalciumParams {
    pub fn new(k: [f64; 11], km: [f64; 6]) -> Result<Self> {
        if !k.iter().chain(&km).all(|v| v.is_finite()) {
            return Err(Error::validation("calcium parameters must be finite"));
        }
        if km.iter().any(|&v| v <= 0.0) {
            return Err(Error::validation("Michaelis constants must be positive"));
        }
        Ok(Self { k, km })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v = take_numbers(text, &CALCIUM_KEYS)?;
        let mut k = [0.0; 11];
        let mut km = [0.0; 6];
        k.copy_from_slice(&v[..11]);
        km.copy_from_slice(&v[11..]);
        Self::new(k, km)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        CALCIUM_KEYS
            .iter()
            .zip(self.k.iter().chain(&self.km))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn michaelis(&self, i: usize, x: f64) -> f64 {
        x / (x + self.km[i - 1])
    }

    fn rhs(&self, x: &[f64]) -> [f64; 4] {
        let k = |i: usize| self.k[i - 1];
        let (g, pc, ca, cr) = (x[0], x[1], x[2], x[3]);
        let exchange = k(7) * pc * ca * self.michaelis(4, cr);
        let release = k(11) * self.michaelis(6, ca);
        [
            k(1) + k(2) * g - k(3) * pc * self.michaelis(1, g) - k(4) * ca * self.michaelis(2, g),
            k(5) * g - k(6) * self.michaelis(3, pc),
            exchange + k(8) * pc + k(9) * g - k(10) * self.michaelis(5, ca) - release,
            -exchange + release,
        ]
    }
}

impl VectorField for CalciumParams {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_row_slice(&self.rhs(x.as_slice()))
    }
}

pub fn calcium_rhs(p: &CalciumParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(4, x.len())?;
    let pairs = [(0, 0), (0, 1), (1, 2), (3, 3), (2, 4), (2, 5)];
    if let Some((s, i)) = pairs.iter().find(|&&(s, i)| x[s] + p.km[i] == 0.0) {
        return Err(Error::Numerical(format!(
            "Michaelis term R{} has zero denominator at state component {}",
            i + 1,
            s + 1
        )));
    }
    Ok(p.eval(x))
}

/// `n` evenly spaced points from `start` to `end` inclusive.
pub fn regular_grid(start: f64, end: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(end > start) {
        return Err(Error::validation("a grid needs n >= 2 and end > start"));
    }
    Ok((0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect())
}

/// States at the grid points reached before integration failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    /// Time at which the state became non-finite or left the bound.
    pub failed_at: Option<f64>,
}

impl Trajectory {
    pub fn reached(&self) -> usize {
        self.states.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let p = self.states.first().map_or(0, |s| s.len());
        DMatrix::from_fn(self.states.len(), p, |i, j| self.states[i][j])
    }
}

fn rk4_step<F: VectorField + ?Sized>(f: &F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f.eval(x);
    let k2 = f.eval(&(x + &k1 * (0.5 * h)));
    let k3 = f.eval(&(x + &k2 * (0.5 * h)));
    let k4 = f.eval(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Classic RK4 with `substeps` uniform steps between grid points, stopping
/// at the first state that is non-finite or has norm above `bound`.
pub fn integrate_bounded<F: VectorField + ?Sized>(
    f: &F,
    x0: &DVector<f64>,
    grid: &[f64],
    substeps: usize,
    bound: f64,
) -> Result<Trajectory> {
    if substeps == 0 {
        return Err(Error::validation("substeps must be at least 1"));
    }
    if grid.is_empty() {
        return Err(Error::validation("empty time grid"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::validation("time grid must be strictly increasing"));
    }
    let ok = |x: &DVector<f64>| x.iter().all(|v| v.is_finite()) && x.norm() <= bound;
    if !ok(x0) {
        return Ok(Trajectory {
            states: Vec::new(),
            failed_at: Some(grid[0]),
        });
    }
    let mut states = Vec::with_capacity(grid.len());
    states.push(x0.clone());
    let mut x = x0.clone();
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            x = rk4_step(f, &x, h);
            if !ok(&x) {
                return Ok(Trajectory {
                    states,
                    failed_at: Some(w[0] + h * (s + 1) as f64),
                });
            }
        }
        states.push(x.clone());
    }
    Ok(Trajectory { states, failed_at: None })
}

/// RK4 over `grid`; rows of the result are the states at the grid points.
pub fn integrate_rk4<F: VectorField + ?Sized>(f: &F, x0: &DVector<f64>, grid: &[f64], substeps: usize) -> Result<DMatrix<f64>> {
    let traj = integrate_bounded(f, x0, grid, substeps, f64::INFINITY)?;
    match traj.failed_at {
        None => Ok(traj.to_matrix()),
        Some(t) => Err(Error::BlowUp {
            t,
            reached: traj.reached(),
        }),
    }
}

/// Noiseless samples of `x' = f(x)` on `grid`.
pub fn simulate<F: VectorField + ?Sized>(f: &F, x0: &DVector<f64>, grid: &[f64], substeps: usize) -> Result<TimeSeries> {
    let states = integrate_rk4(f, x0, grid, substeps)?;
    TimeSeries::new(grid.to_vec(), states)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Gaussian,
    /// Gaussian noise with negative observations clamped to zero.
    ZeroTruncated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub variance: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

/// Adds i.i.d. noise to every entry, drawn in row-major order.
pub fn add_noise(ts: &TimeSeries, spec: &NoiseSpec) -> Result<TimeSeries> {
    if !(spec.variance > 0.0 && spec.variance.is_finite()) {
        return Err(Error::validation(format!("noise variance must be positive, got {}", spec.variance)));
    }
    let normal = Normal::new(0.0, spec.variance.sqrt()).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = ts.values().clone();
    for i in 0..values.nrows() {
        for j in 0..values.ncols() {
            let mut v = values[(i, j)] + normal.sample(&mut rng);
            if spec.mode == NoiseMode::ZeroTruncated {
                v = v.max(0.0);
            }
            values[(i, j)] = v;
        }
    }
    TimeSeries::new(ts.times().to_vec(), values)
}

/// `sum_l |y_l - g(t_l)|^2`.
pub fn smoothing_error(s: &Smoother, ts: &TimeSeries) -> Result<f64> {
    check_dim(s.dim(), ts.dim())?;
    Ok((0..ts.len())
        .map(|l| (ts.observation(l) - s.eval_g(ts.times()[l])).norm_squared())
        .sum())
}

/// `sum_l |g'(tau_l) - h(g(tau_l))|^2`.
pub fn gm_error<F: VectorField + ?Sized>(model: &F, s: &Smoother, taus: &[f64]) -> f64 {
    taus.iter()
        .map(|&t| (s.eval_gdot(t) - model.eval(&s.eval_g(t))).norm_squared())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryMode {
    /// Integrate `x' = h(x)` from `g(t_0)`.
    #[default]
    SelfConsistent,
    /// `g(t_0) + int_{t_0}^{t} h(g(tau)) dtau` by composite Simpson.
    AlongG,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryReport {
    /// Sum of squared errors over the reached observations.
    pub error: f64,
    /// Predicted states at the reached observation times.
    pub predicted: DMatrix<f64>,
    pub reached: usize,
    pub failed_at: Option<f64>,
}

impl TrajectoryReport {
    pub fn complete(&self) -> bool {
        self.failed_at.is_none()
    }

    /// Mean squared error per reached entry.
    pub fn mse(&self) -> f64 {
        if self.reached == 0 {
            f64::INFINITY
        } else {
            self.error / (self.reached * self.predicted.ncols()) as f64
        }
    }
}

/// Reconstructed trajectory of a fitted model at the observation times.
pub fn predict<F: VectorField + ?Sized>(model: &F, s: &Smoother, times: &[f64], mode: TrajectoryMode, substeps: usize) -> Result<Trajectory> {
    let x0 = s.eval_g(times[0]);
    match mode {
        TrajectoryMode::SelfConsistent => integrate_bounded(model, &x0, times, substeps, f64::INFINITY),
        TrajectoryMode::AlongG => {
            if substeps == 0 {
                return Err(Error::validation("substeps must be at least 1"));
            }
            let panels = 2 * substeps;
            let mut states = vec![x0.clone()];
            let mut x = x0;
            for w in times.windows(2) {
                let h = (w[1] - w[0]) / panels as f64;
                let mut acc = DVector::zeros(x.len());
                for i in 0..=panels {
                    let weight = if i == 0 || i == panels {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    acc += model.eval(&s.eval_g(w[0] + h * i as f64)) * weight;
                }
                x += acc * (h / 3.0);
                if x.iter().any(|v| !v.is_finite()) {
                    return Ok(Trajectory {
                        states,
                        failed_at: Some(w[1]),
                    });
                }
                states.push(x.clone());
            }
            Ok(Trajectory { states, failed_at: None })
        }
    }
}

/// Squared error between the reconstructed trajectory and the observations.
/// A blow-up is reported with the error over the points reached.
pub fn trajectory_error<F: VectorField + ?Sized>(
    model: &F,
    s: &Smoother,
    ts: &TimeSeries,
    mode: TrajectoryMode,
    substeps: usize,
) -> Result<TrajectoryReport> {
    check_dim(s.dim(), ts.dim())?;
    let traj = predict(model, s, ts.times(), mode, substeps)?;
    let error = traj
        .states
        .iter()
        .enumerate()
        .map(|(l, x)| (ts.observation(l) - x).norm_squared())
        .sum();
    Ok(TrajectoryReport {
        error,
        predicted: traj.to_matrix(),
        reached: traj.reached(),
        failed_at: traj.failed_at,
    })
}

/// Mean of squared entrywise differences.
pub fn mean_squared_difference(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::validation("empty matrices"));
    }
    Ok((a - b).norm_squared() / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapMetric {
    /// Mean squared difference per entry.
    #[default]
    Mse,
    /// Sum of squared differences.
    Sse,
}

/// Grid of initial conditions and the comparison horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMapSpec {
    pub v_grid: Vec<f64>,
    pub r_grid: Vec<f64>,
    pub horizon: f64,
    /// Comparison points on `[0, horizon]`.
    pub points: usize,
    pub substeps: usize,
    pub metric: MapMetric,
}

impl ErrorMapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.v_grid.is_empty() || self.r_grid.is_empty() {
            return Err(Error::validation("error map grids must be non-empty"));
        }
        regular_grid(0.0, self.horizon, self.points)?;
        if self.substeps == 0 {
            return Err(Error::validation("substeps must be at least 1"));
        }
        Ok(())
    }
}

/// Trajectory discrepancy from one initial condition; `+inf` if either
/// system blows up.
pub fn error_map_cell<M, T>(model: &M, truth: &T, x0: &DVector<f64>, spec: &ErrorMapSpec) -> Result<f64>
where
    M: VectorField + ?Sized,
    T: VectorField + ?Sized,
{
    let grid = regular_grid(0.0, spec.horizon, spec.points)?;
    let learned = integrate_bounded(model, x0, &grid, spec.substeps, f64::INFINITY)?;
    let reference = integrate_bounded(truth, x0, &grid, spec.substeps, f64::INFINITY)?;
    if learned.failed_at.is_some() || reference.failed_at.is_some() {
        return Ok(f64::INFINITY);
    }
    let sse = (learned.to_matrix() - reference.to_matrix()).norm_squared();
    Ok(match spec.metric {
        MapMetric::Sse => sse,
        MapMetric::Mse => sse / (grid.len() * x0.len()) as f64,
    })
}

/// Rows index `v_grid`, columns `r_grid`.
pub fn error_map<M, T>(model: &M, truth: &T, spec: &ErrorMapSpec) -> Result<DMatrix<f64>>
where
    M: VectorField + ?Sized,
    T: VectorField + ?Sized,
{
    spec.validate()?;
    let mut out = DMatrix::zeros(spec.v_grid.len(), spec.r_grid.len());
    for (i, &v) in spec.v_grid.iter().enumerate() {
        for (j, &r) in spec.r_grid.iter().enumerate() {
            out[(i, j)] = error_map_cell(model, truth, &DVector::from_vec(vec![v, r]), spec)?;
        }
    }
    Ok(out)
}
