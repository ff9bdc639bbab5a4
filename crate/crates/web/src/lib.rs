//! Browser bindings: one noisy FHN data set held in a [`Demo`], with three
//! operations driven from the page (smoothing, fitting and integrating the
//! learned field, and an error map over initial conditions).
//!
//! Every array crossing the boundary is flat and row-major.

use gradmatch::error::{Error, Result};
use gradmatch::matching::{window_times, Collocation, OdeModel, TauMode};
use gradmatch::pipeline::{score_candidate, FhnBenchmark, Prepared, TwoStepConfig};
use gradmatch::simulate::{error_map, integrate_bounded, regular_grid, ErrorMapSpec, FhnParams, MapMetric};
use gradmatch::smoother::{loocv_select, CvGrid, LooSelection, Smoother};
use gradmatch::timeseries::TimeSeries;
use nalgebra::{DMatrix, DVector};
use wasm_bindgen::prelude::*;

const SUBSTEPS: usize = 20;

#[wasm_bindgen]
pub struct Demo {
    params: FhnParams,
    truth: TimeSeries,
    noisy: TimeSeries,
    smoother: Option<Smoother>,
    selections: Vec<LooSelection>,
    model: Option<OdeModel>,
    trajectory_mse: f64,
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect()
}

fn with_times(times: &[f64], values: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len() * (values.ncols() + 1));
    for (i, &t) in times.iter().enumerate() {
        out.push(t);
        out.extend(values.row(i).iter());
    }
    out
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

impl Demo {
    pub fn generate(seed: u64, variance: f64, n: usize) -> Result<Self> {
        let bench = FhnBenchmark {
            seed,
            variance,
            n,
            ..Default::default()
        };
        let (truth, noisy) = bench.generate()?;
        Ok(Self {
            params: bench.params,
            truth,
            noisy,
            smoother: None,
            selections: Vec::new(),
            model: None,
            trajectory_mse: f64::NAN,
        })
    }

    /// Fits both coordinates with one `(gamma, lambda)` and samples the
    /// result on `points` regular times as `[t, g1, g2]` rows.
    pub fn smooth_fixed(&mut self, gamma: f64, lambda: f64, points: usize) -> Result<Vec<f64>> {
        let smoother = Smoother::fit(&self.noisy, &[(gamma, lambda); 2])?;
        self.set_smoother(smoother, Vec::new());
        self.sample_smoother(points)
    }

    /// Leave-one-out choice per coordinate, sampled as in [`Demo::smooth_fixed`].
    pub fn smooth_loo(&mut self, points: usize) -> Result<Vec<f64>> {
        let grid = CvGrid::default();
        let selections = (0..self.noisy.dim())
            .map(|j| loocv_select(self.noisy.times(), &self.noisy.variable(j), &grid))
            .collect::<Result<Vec<_>>>()?;
        let hyper: Vec<(f64, f64)> = selections.iter().map(|s| (s.gamma, s.lambda)).collect();
        let smoother = Smoother::fit(&self.noisy, &hyper)?;
        self.set_smoother(smoother, selections);
        self.sample_smoother(points)
    }

    fn set_smoother(&mut self, smoother: Smoother, selections: Vec<LooSelection>) {
        self.smoother = Some(smoother);
        self.selections = selections;
        self.model = None;
        self.trajectory_mse = f64::NAN;
    }

    fn smoother(&self) -> Result<&Smoother> {
        self.smoother.as_ref().ok_or_else(|| Error::Validation("smooth the data first".into()))
    }

    fn sample_smoother(&self, points: usize) -> Result<Vec<f64>> {
        let s = self.smoother()?;
        let times = regular_grid(self.noisy.start(), self.noisy.end(), points)?;
        let mut out = Vec::with_capacity(points * 3);
        for &t in &times {
            out.push(t);
            out.extend(s.eval_g(t).iter());
        }
        Ok(out)
    }

    /// Learns the field from the current smoother and returns its
    /// self-consistent trajectory MSE against the observations.
    pub fn fit_field(&mut self, gamma_h: f64, lambda_h: f64, m: usize) -> Result<f64> {
        let smoother = self.smoother()?.clone();
        let cfg = TwoStepConfig {
            m,
            ..Default::default()
        };
        let taus = window_times(&smoother, m, TauMode::Regular)?;
        let collocation = Collocation::new(&smoother, &taus)?;
        let prep = Prepared {
            smoother,
            selections: self.selections.clone(),
            taus,
            collocation,
        };
        let (model, score) = score_candidate(&prep, &self.noisy, &cfg, gamma_h, lambda_h)?;
        self.trajectory_mse = score.trajectory_error / (self.noisy.len() * self.noisy.dim()) as f64;
        self.model = Some(model);
        Ok(self.trajectory_mse)
    }

    fn model(&self) -> Result<&OdeModel> {
        self.model.as_ref().ok_or_else(|| Error::Validation("fit a model first".into()))
    }

    /// `[t, v, r]` rows for the learned field followed by the same rows for
    /// the true system; both stop early on blow-up, so lengths can differ.
    pub fn trajectories(&self, v: f64, r: f64, horizon: f64, points: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let grid = regular_grid(0.0, horizon, points)?;
        let x0 = DVector::from_vec(vec![v, r]);
        let learned = integrate_bounded(self.model()?, &x0, &grid, SUBSTEPS, f64::INFINITY)?;
        let truth = integrate_bounded(&self.params, &x0, &grid, SUBSTEPS, f64::INFINITY)?;
        Ok((
            with_times(&grid[..learned.reached()], &learned.to_matrix()),
            with_times(&grid[..truth.reached()], &truth.to_matrix()),
        ))
    }

    /// `steps x steps` MSE map over `[lo, hi]^2`, rows indexed by `v`.
    pub fn map(&self, lo: f64, hi: f64, steps: usize, horizon: f64, points: usize) -> Result<Vec<f64>> {
        let axis = regular_grid(lo, hi, steps)?;
        let spec = ErrorMapSpec {
            v_grid: axis.clone(),
            r_grid: axis,
            horizon,
            points,
            substeps: SUBSTEPS,
            metric: MapMetric::Mse,
        };
        Ok(flatten(&error_map(self.model()?, &self.params, &spec)?))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, variance: f64, n: usize) -> std::result::Result<Demo, JsError> {
        Demo::generate(seed as u64, variance, n).map_err(js)
    }

    /// `[t, v, r]` rows of the noisy observations.
    pub fn observations(&self) -> Vec<f64> {
        with_times(self.noisy.times(), self.noisy.values())
    }

    /// `[t, v, r]` rows of the noiseless trajectory.
    pub fn truth(&self) -> Vec<f64> {
        with_times(self.truth.times(), self.truth.values())
    }

    pub fn smooth(&mut self, gamma: f64, lambda: f64, points: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.smooth_fixed(gamma, lambda, points).map_err(js)
    }

    #[wasm_bindgen(js_name = smoothAuto)]
    pub fn smooth_auto(&mut self, points: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.smooth_loo(points).map_err(js)
    }

    /// `[gamma, lambda, loo]` per coordinate after [`Demo::smooth_auto`], empty otherwise.
    pub fn selections(&self) -> Vec<f64> {
        self.selections.iter().flat_map(|s| [s.gamma, s.lambda, s.loo_error]).collect()
    }

    pub fn fit(&mut self, gamma_h: f64, lambda_h: f64, m: usize) -> std::result::Result<f64, JsError> {
        self.fit_field(gamma_h, lambda_h, m).map_err(js)
    }

    #[wasm_bindgen(js_name = learnedTrajectory)]
    pub fn learned_trajectory(&self, v: f64, r: f64, horizon: f64, points: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.trajectories(v, r, horizon, points).map(|t| t.0).map_err(js)
    }

    #[wasm_bindgen(js_name = trueTrajectory)]
    pub fn true_trajectory(&self, v: f64, r: f64, horizon: f64, points: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.trajectories(v, r, horizon, points).map(|t| t.1).map_err(js)
    }

    #[wasm_bindgen(js_name = errorMap)]
    pub fn error_map(&self, lo: f64, hi: f64, steps: usize, horizon: f64, points: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.map(lo, hi, steps, horizon, points).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Demo {
        Demo::generate(1, 0.1, 41).unwrap()
    }

    #[test]
    fn observations_are_flat_rows() {
        let d = demo();
        let obs = d.observations();
        assert_eq!(obs.len(), 41 * 3);
        assert_eq!(obs[0], 0.0);
        assert_eq!(obs[3], 0.5);
        assert_eq!(&d.truth()[1..3], &[-1.0, 1.0]);
    }

    #[test]
    fn fixed_smoothing_samples_requested_points() {
        let mut d = demo();
        let curve = d.smooth_fixed(0.25, 1e-2, 50).unwrap();
        assert_eq!(curve.len(), 150);
        assert_eq!(curve[147], 20.0);
        assert!(curve.iter().all(|v| v.is_finite()));
        assert!(d.selections().is_empty());
    }

    #[test]
    fn loo_smoothing_reports_selections() {
        let mut d = demo();
        d.smooth_loo(10).unwrap();
        let sel = d.selections();
        assert_eq!(sel.len(), 6);
        assert!(sel.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn fit_needs_smoother_and_map_needs_model() {
        let mut d = demo();
        assert!(d.fit_field(1.0, 1e-2, 21).is_err());
        d.smooth_loo(10).unwrap();
        assert!(d.map(-1.0, 1.0, 2, 1.0, 5).is_err());
    }

    #[test]
    fn fit_trajectory_and_map() {
        let mut d = demo();
        d.smooth_loo(10).unwrap();
        let mse = d.fit_field(1.0, 1e-2, 41).unwrap();
        assert!(mse.is_finite() && mse > 0.0);

        let (learned, truth) = d.trajectories(-1.0, 1.0, 5.0, 11).unwrap();
        assert_eq!(truth.len(), 33);
        assert_eq!(&learned[..3], &[0.0, -1.0, 1.0]);

        let map = d.map(-2.0, 2.0, 3, 2.0, 5).unwrap();
        assert_eq!(map.len(), 9);
        assert!(map.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn refitting_the_smoother_drops_the_model() {
        let mut d = demo();
        d.smooth_fixed(0.25, 1e-2, 5).unwrap();
        d.fit_field(1.0, 1e-2, 21).unwrap();
        d.smooth_fixed(0.5, 1e-2, 5).unwrap();
        assert!(d.trajectories(0.0, 0.0, 1.0, 3).is_err());
    }
}
