//! Parametric baselines on planar systems: simulate-and-compare least
//! squares minimised by Nelder-Mead with random restarts.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::field::VectorField;
use crate::simulate::FhnParams;
use crate::timeseries::TimeSeries;

/// Two cubic polynomials in `(V, R)`:
///
/// ```text
/// V' = p1 V + p2 V^2 + p3 V^3 + p4 R + p5 R^2 + p6 R^3 + p7
/// R' = p8 V + p9 V^2 + p10 V^3 + p11 R + p12 R^2 + p13 R^3 + p14
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicModelParams(pub [f64; 14]);

impl CubicModelParams {
    pub fn new(p: [f64; 14]) -> Result<Self> {
        if p.iter().all(|v| v.is_finite()) {
            Ok(Self(p))
        } else {
            Err(Error::validation("cubic coefficients must be finite"))
        }
    }

    /// Coefficients reproducing the FHN right-hand side exactly.
    pub fn from_fhn(f: &FhnParams) -> Self {
        let mut p = [0.0; 14];
        p[0] = f.c;
        p[2] = -f.c / 3.0;
        p[3] = f.c;
        p[7] = -1.0 / f.c;
        p[10] = -f.b / f.c;
        p[13] = f.a / f.c;
        Self(p)
    }

    fn rhs(&self, x: [f64; 2]) -> [f64; 2] {
        cubic_planar(&self.0, x)
    }
}

fn cubic_planar(p: &[f64], [v, r]: [f64; 2]) -> [f64; 2] {
    let (v2, r2) = (v * v, r * r);
    [
        p[0] * v + p[1] * v2 + p[2] * v2 * v + p[3] * r + p[4] * r2 + p[5] * r2 * r + p[6],
        p[7] * v + p[8] * v2 + p[9] * v2 * v + p[10] * r + p[11] * r2 + p[12] * r2 * r + p[13],
    ]
}

fn fhn_planar(p: &[f64], [v, r]: [f64; 2]) -> [f64; 2] {
    let (a, b, c) = (p[0], p[1], p[2]);
    [c * (v - v * v * v / 3.0 + r), -(v - a + b * r) / c]
}

impl VectorField for CubicModelParams {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_row_slice(&self.rhs([x[0], x[1]]))
    }
}

pub fn cubic_rhs(p: &CubicModelParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(2, x.len())?;
    Ok(p.eval(x))
}

/// Model families available to the parametric fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParametricFamily {
    /// FHN with free `(a, b, c)`.
    Fhn3,
    /// [`CubicModelParams`].
    Cubic14,
}

impl ParametricFamily {
    pub fn n_params(self) -> usize {
        match self {
            Self::Fhn3 => 3,
            Self::Cubic14 => 14,
        }
    }

    fn rhs(self, p: &[f64], x: [f64; 2]) -> [f64; 2] {
        match self {
            Self::Fhn3 => fhn_planar(p, x),
            Self::Cubic14 => cubic_planar(p, x),
        }
    }

    /// The vector field for a parameter vector.
    pub fn field(self, params: &[f64]) -> Result<impl VectorField + Clone> {
        check_dim(self.n_params(), params.len())?;
        let params = params.to_vec();
        Ok(move |x: &DVector<f64>| DVector::from_row_slice(&self.rhs(&params, [x[0], x[1]])))
    }
}

impl std::str::FromStr for ParametricFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fhn3" | "fhn" => Ok(Self::Fhn3),
            "cubic14" | "cubic" => Ok(Self::Cubic14),
            other => Err(Error::Config(format!("unknown parametric family `{other}` (expected fhn3 or cubic14)"))),
        }
    }
}

/// Trajectories whose state norm exceeds this are scored as `+inf`.
pub const BLOW_UP_NORM: f64 = 1e6;

/// RK4 for planar systems; `None` once the state leaves the bound.
fn integrate_planar(f: impl Fn([f64; 2]) -> [f64; 2], x0: [f64; 2], times: &[f64], substeps: usize) -> Option<Vec<[f64; 2]>> {
    let add = |x: [f64; 2], k: [f64; 2], s: f64| [x[0] + s * k[0], x[1] + s * k[1]];
    let mut x = x0;
    let mut out = Vec::with_capacity(times.len());
    out.push(x);
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for _ in 0..substeps {
            let k1 = f(x);
            let k2 = f(add(x, k1, 0.5 * h));
            let k3 = f(add(x, k2, 0.5 * h));
            let k4 = f(add(x, k3, h));
            x = [
                x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            ];
            if !(x[0].is_finite() && x[1].is_finite()) || x[0].hypot(x[1]) > BLOW_UP_NORM {
                return None;
            }
        }
        out.push(x);
    }
    Some(out)
}

/// `sum_l |y_l - x_theta(t_l)|^2` with `x_theta` integrated from `y_0`.
pub fn simulation_sse(family: ParametricFamily, params: &[f64], ts: &TimeSeries, substeps: usize) -> f64 {
    let y = ts.values();
    let x0 = [y[(0, 0)], y[(0, 1)]];
    match integrate_planar(|x| family.rhs(params, x), x0, ts.times(), substeps) {
        None => f64::INFINITY,
        Some(states) => states
            .iter()
            .enumerate()
            .map(|(l, s)| (y[(l, 0)] - s[0]).powi(2) + (y[(l, 1)] - s[1]).powi(2))
            .sum(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    pub max_evals: usize,
    /// Stop when all vertices lie within this (max-norm) of the best.
    pub x_tol: f64,
    /// Stop when all values lie within this of the best.
    pub f_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            max_evals: 4000,
            x_tol: 1e-8,
            f_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Nelder-Mead with reflection 1, expansion 2, contraction 0.5 and shrink
/// 0.5. The initial simplex perturbs each coordinate by 5% (0.00025 for
/// zero coordinates). NaN values are treated as `+inf`.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let n = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] = if x[i] != 0.0 { 1.05 * x[i] } else { 0.00025 };
        let v = eval(&x);
        simplex.push((x, v));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    order(&mut simplex);
    let mut iterations = 0;
    let blend = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    while iterations < opts.max_iters && evals.get() < opts.max_evals {
        let best = simplex[0].1;
        if best == f64::INFINITY {
            break;
        }
        let f_spread = simplex.iter().map(|s| (s.1 - best).abs()).fold(0.0, f64::max);
        let x_spread = simplex
            .iter()
            .skip(1)
            .flat_map(|s| s.0.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread <= opts.f_tol && x_spread <= opts.x_tol {
            break;
        }
        iterations += 1;
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        // centroid + t (centroid - worst)
        let along = |t: f64| blend(&centroid, &worst.0, -t);
        let xr = along(1.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let xc = along(0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < fr.min(worst.1) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = blend(&best, &s.0, 0.5);
                    s.1 = eval(&s.0);
                }
            }
        }
        order(&mut simplex);
    }
    let (x, value) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        value,
        iterations,
        evaluations: evals.get(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricOptions {
    pub restarts: usize,
    pub seed: u64,
    pub substeps: usize,
    pub nelder_mead: NelderMeadOptions,
    /// Starting point for the first restart instead of a random draw.
    pub initial: Option<Vec<f64>>,
}

impl Default for ParametricOptions {
    fn default() -> Self {
        Self {
            restarts: 100,
            seed: 0,
            substeps: 20,
            nelder_mead: NelderMeadOptions::default(),
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartRecord {
    pub start: Vec<f64>,
    pub params: Vec<f64>,
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricFit {
    pub family: ParametricFamily,
    pub params: Vec<f64>,
    pub sse: f64,
    /// `sse / (n p)` against the fitted observations.
    pub mse: f64,
    pub restarts: Vec<RestartRecord>,
}

impl ParametricFit {
    /// Best value over the first `k` restarts.
    pub fn best_of_first(&self, k: usize) -> f64 {
        self.restarts.iter().take(k).map(|r| r.sse).fold(f64::INFINITY, f64::min)
    }

    /// One line per restart: `restart,sse,p1..pd`.
    pub fn report_csv(&self) -> String {
        let d = self.family.n_params();
        let mut s = String::from("restart,sse");
        for i in 1..=d {
            let _ = write!(s, ",p{i}");
        }
        s.push('\n');
        for (i, r) in self.restarts.iter().enumerate() {
            let _ = write!(s, "{},{}", i + 1, r.sse);
            for v in &r.params {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Starting points for each restart, drawn from N(0, 1) in sequence.
pub fn restart_starts(family: ParametricFamily, opts: &ParametricOptions) -> Result<Vec<Vec<f64>>> {
    if opts.restarts == 0 {
        return Err(Error::validation("need at least one restart"));
    }
    let d = family.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = Vec::with_capacity(opts.restarts);
    for i in 0..opts.restarts {
        let draw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        match (&opts.initial, i) {
            (Some(init), 0) => {
                check_dim(d, init.len())?;
                starts.push(init.clone());
            }
            _ => starts.push(draw),
        }
    }
    Ok(starts)
}

/// One Nelder-Mead run from `start`.
pub fn run_restart(family: ParametricFamily, ts: &TimeSeries, start: &[f64], opts: &ParametricOptions) -> RestartRecord {
    let res = nelder_mead(|p| simulation_sse(family, p, ts, opts.substeps), start, &opts.nelder_mead);
    RestartRecord {
        start: start.to_vec(),
        params: res.x,
        sse: res.value,
    }
}

/// Collects restart results into the best fit.
pub fn merge_restarts(family: ParametricFamily, ts: &TimeSeries, restarts: Vec<RestartRecord>) -> Result<ParametricFit> {
    let best = restarts
        .iter()
        .filter(|r| r.sse.is_finite())
        .min_by(|a, b| a.sse.total_cmp(&b.sse))
        .ok_or_else(|| {
            Error::Numerical(format!(
                "all {} restarts diverged (simulated trajectories left |x| <= {BLOW_UP_NORM})",
                restarts.len()
            ))
        })?;
    Ok(ParametricFit {
        family,
        params: best.params.clone(),
        sse: best.sse,
        mse: best.sse / (ts.len() * ts.dim()) as f64,
        restarts: restarts.clone(),
    })
}

fn check_series(ts: &TimeSeries, opts: &ParametricOptions) -> Result<()> {
    check_dim(2, ts.dim())?;
    if opts.substeps == 0 {
        return Err(Error::validation("substeps must be at least 1"));
    }
    Ok(())
}

/// Best of `opts.restarts` Nelder-Mead runs, run sequentially.
pub fn fit_parametric(family: ParametricFamily, ts: &TimeSeries, opts: &ParametricOptions) -> Result<ParametricFit> {
    check_series(ts, opts)?;
    let starts = restart_starts(family, opts)?;
    let records = starts.iter().map(|s| run_restart(family, ts, s, opts)).collect();
    merge_restarts(family, ts, records)
}

/// Like [`fit_parametric`] but with the restarts evaluated by `map`, which
/// must preserve order (e.g. a parallel iterator collect).
pub fn fit_parametric_with<M>(family: ParametricFamily, ts: &TimeSeries, opts: &ParametricOptions, map: M) -> Result<ParametricFit>
where
    M: FnOnce(&[Vec<f64>], &(dyn Fn(&[f64]) -> RestartRecord + Sync)) -> Vec<RestartRecord>,
{
    check_series(ts, opts)?;
    let starts = restart_starts(family, opts)?;
    let run = |s: &[f64]| run_restart(family, ts, s, opts);
    let records = map(&starts, &run);
    merge_restarts(family, ts, records)
}

/// Trajectory of a fitted family from `x0` on `times`.
pub fn simulate_family(family: ParametricFamily, params: &[f64], x0: [f64; 2], times: &[f64], substeps: usize) -> Result<Vec<[f64; 2]>> {
    check_dim(family.n_params(), params.len())?;
    integrate_planar(|x| family.rhs(params, x), x0, times, substeps).ok_or(Error::BlowUp {
        t: f64::NAN,
        reached: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{fhn_rhs, regular_grid, simulate};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn cubic_trivial_cases() {
        let zero = CubicModelParams::new([0.0; 14]).unwrap();
        assert_eq!(cubic_rhs(&zero, &DVector::from_vec(vec![0.4, -1.0])).unwrap(), DVector::zeros(2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = [0.0; 14];
        p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let double = CubicModelParams(p.map(|v| 2.0 * v));
        let x = DVector::from_vec(vec![0.3, -0.8]);
        let a = cubic_rhs(&CubicModelParams(p), &x).unwrap();
        let b = cubic_rhs(&double, &x).unwrap();
        assert!((b - a * 2.0).amax() <= 1e-14);
        assert!(cubic_rhs(&zero, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn cubic_reproduces_fhn() {
        let f = FhnParams::default();
        let p = CubicModelParams::from_fhn(&f);
        let expected = [3.0, 0.0, -1.0, 3.0, 0.0, 0.0, 0.0, -1.0 / 3.0, 0.0, 0.0, -1.0 / 15.0, 0.0, 0.0, 1.0 / 15.0];
        for (got, want) in p.0.iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let diff = cubic_rhs(&p, &x).unwrap() - fhn_rhs(&f, &x).unwrap();
            assert!(diff.amax() <= 1e-12);
        }
    }

    #[test]
    fn listed_alternative_coefficients_do_not_reproduce_fhn() {
        // p11 = p14 = -1/6 with the other nonzero values unchanged
        let mut p = CubicModelParams::from_fhn(&FhnParams::default()).0;
        p[10] = -1.0 / 6.0;
        p[13] = -1.0 / 6.0;
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let alt = cubic_rhs(&CubicModelParams(p), &x).unwrap();
        let truth = fhn_rhs(&FhnParams::default(), &x).unwrap();
        assert!((alt[1] - truth[1]).abs() > 0.2);
    }

    #[test]
    fn planar_integrator_matches_generic() {
        let f = FhnParams::default();
        let grid = regular_grid(0.0, 5.0, 11).unwrap();
        let generic = crate::simulate::integrate_rk4(&f, &DVector::from_vec(vec![-1.0, 1.0]), &grid, 20).unwrap();
        let planar = simulate_family(ParametricFamily::Fhn3, &[0.2, 0.2, 3.0], [-1.0, 1.0], &grid, 20).unwrap();
        for (l, s) in planar.iter().enumerate() {
            assert_abs_diff_eq!(s[0], generic[(l, 0)], epsilon = 1e-13);
            assert_abs_diff_eq!(s[1], generic[(l, 1)], epsilon = 1e-13);
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let res = nelder_mead(f, &[-1.2, 1.0], &NelderMeadOptions::default());
        assert!((res.x[0] - 1.0).abs() <= 1e-6 && (res.x[1] - 1.0).abs() <= 1e-6, "{:?}", res);
        assert!(res.evaluations <= 2000, "{}", res.evaluations);
    }

    #[test]
    fn quadratic_and_infinite_regions() {
        let f = |x: &[f64]| if x[0] < -1.0 { f64::NAN } else { (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2) };
        let res = nelder_mead(f, &[0.0, 0.0], &NelderMeadOptions::default());
        assert!((res.x[0] - 2.0).abs() <= 1e-6 && (res.x[1] + 1.0).abs() <= 1e-6);
        let all_inf = nelder_mead(|_| f64::INFINITY, &[0.0], &NelderMeadOptions::default());
        assert_eq!(all_inf.value, f64::INFINITY);
        assert_eq!(all_inf.iterations, 0);
    }

    fn fhn_series() -> TimeSeries {
        let grid = regular_grid(0.0, 20.0, 41).unwrap();
        simulate(&FhnParams::default(), &DVector::from_vec(vec![-1.0, 1.0]), &grid, 20).unwrap()
    }

    #[test]
    fn warm_start_from_truth() {
        let ts = fhn_series();
        let opts = ParametricOptions {
            restarts: 1,
            initial: Some(vec![0.2, 0.2, 3.0]),
            ..Default::default()
        };
        let fit = fit_parametric(ParametricFamily::Fhn3, &ts, &opts).unwrap();
        assert!(fit.mse <= 1e-12, "{}", fit.mse);
    }

    #[test]
    fn prefix_property_and_report() {
        let ts = fhn_series();
        let opts = ParametricOptions {
            restarts: 6,
            seed: 4,
            nelder_mead: NelderMeadOptions { max_iters: 200, ..Default::default() },
            ..Default::default()
        };
        let fit = fit_parametric(ParametricFamily::Fhn3, &ts, &opts).unwrap();
        let bests: Vec<f64> = (1..=6).map(|k| fit.best_of_first(k)).collect();
        assert!(bests.windows(2).all(|w| w[1] <= w[0]));
        let shorter = fit_parametric(ParametricFamily::Fhn3, &ts, &ParametricOptions { restarts: 3, ..opts.clone() }).unwrap();
        assert_eq!(&shorter.restarts[..], &fit.restarts[..3]);
        let csv = fit.report_csv();
        assert!(csv.starts_with("restart,sse,p1,p2,p3\n1,"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn custom_map_matches_sequential() {
        let ts = fhn_series();
        let opts = ParametricOptions {
            restarts: 3,
            seed: 1,
            nelder_mead: NelderMeadOptions { max_iters: 100, ..Default::default() },
            ..Default::default()
        };
        let seq = fit_parametric(ParametricFamily::Fhn3, &ts, &opts).unwrap();
        let mapped = fit_parametric_with(ParametricFamily::Fhn3, &ts, &opts, |starts, run| starts.iter().map(|s| run(s)).collect()).unwrap();
        assert_eq!(seq, mapped);
    }

    #[test]
    fn all_diverging_restarts_fail() {
        let ts = fhn_series();
        let opts = ParametricOptions {
            restarts: 2,
            initial: None,
            ..Default::default()
        };
        let huge = |_: &[f64]| RestartRecord {
            start: vec![],
            params: vec![],
            sse: f64::INFINITY,
        };
        let err = fit_parametric_with(ParametricFamily::Fhn3, &ts, &opts, |starts, _| starts.iter().map(|s| huge(s)).collect()).unwrap_err();
        assert!(err.is_numerical());
        assert!(fit_parametric(ParametricFamily::Fhn3, &ts, &ParametricOptions { restarts: 0, ..opts }).is_err());
    }

    #[test]
    fn family_names() {
        assert_eq!("fhn3".parse::<ParametricFamily>().unwrap(), ParametricFamily::Fhn3);
        assert_eq!("cubic14".parse::<ParametricFamily>().unwrap().n_params(), 14);
        assert!("quartic".parse::<ParametricFamily>().is_err());
    }
}
