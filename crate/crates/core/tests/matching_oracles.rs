use gradmatch::kernel::GaussianKernel;
use gradmatch::kernel_learn::project_psd;
use gradmatch::matching::{fit_multi, fit_ridge_collocation, Collocation, MultiProblem, MultiSolver, SgdConfig};
use gradmatch::operator::{KernelFamily, OperatorKernel, StructureMatrix};
use gradmatch::simulate::regular_grid;
use gradmatch::smoother::Smoother;
use gradmatch::sparse::{prox_group, prox_l1, prox_sparse_group, Groups};
use gradmatch::timeseries::TimeSeries;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_smoother(rng: &mut ChaCha8Rng, p: usize) -> Smoother {
    let times = regular_grid(0.0, 6.0, 15).unwrap();
    let phase: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..6.0)).collect();
    let values = DMatrix::from_fn(15, p, |i, j| (times[i] + phase[j]).sin() + 0.05 * rng.random_range(-1.0..1.0));
    let ts = TimeSeries::new(times, values).unwrap();
    Smoother::fit(&ts, &vec![(0.5, 1e-3); p]).unwrap()
}

fn random_kernel(rng: &mut ChaCha8Rng, family: KernelFamily, p: usize) -> OperatorKernel {
    let b = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    let c = StructureMatrix::new(&b * b.transpose() + DMatrix::identity(p, p) * 0.1).unwrap();
    let structure = family.needs_structure().then_some(c);
    OperatorKernel::new(family, GaussianKernel::new(rng.random_range(0.3..2.0)).unwrap(), structure).unwrap()
}

fn dense_block_gram(kernel: &OperatorKernel, pts: &[DVector<f64>]) -> DMatrix<f64> {
    let p = pts[0].len();
    let mut k = DMatrix::zeros(pts.len() * p, pts.len() * p);
    for (i, x) in pts.iter().enumerate() {
        for (j, z) in pts.iter().enumerate() {
            let b = kernel.eval_block(x, z).unwrap();
            k.view_mut((i * p, j * p), (p, p)).copy_from(&b);
        }
    }
    k
}

#[test]
fn ridge_fit_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for family in [KernelFamily::Decomposable, KernelFamily::Transformable, KernelFamily::Hadamard] {
        for _ in 0..5 {
            let s = random_smoother(&mut rng, 2);
            let taus = regular_grid(0.5, 5.5, 6).unwrap();
            let col = Collocation::new(&s, &taus).unwrap();
            let kernel = random_kernel(&mut rng, family, 2);
            let ridge = 0.1;
            let model = fit_ridge_collocation(&col, &kernel, ridge).unwrap();
            let mut system = dense_block_gram(&kernel, &col.anchors);
            system += DMatrix::identity(12, 12) * ridge;
            let expected = system.lu().solve(&col.gdot).unwrap();
            let gap = (model.stacked_coeffs() - expected).amax();
            assert!(gap <= 1e-10, "{family}: {gap}");
        }
    }
}

#[test]
fn model_evaluation_is_the_kernel_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for family in [KernelFamily::Decomposable, KernelFamily::Transformable, KernelFamily::Hadamard] {
        let s = random_smoother(&mut rng, 3);
        let taus = regular_grid(0.5, 5.5, 8).unwrap();
        let col = Collocation::new(&s, &taus).unwrap();
        let kernel = random_kernel(&mut rng, family, 3);
        let model = fit_ridge_collocation(&col, &kernel, 0.05).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
            let mut naive = DVector::zeros(3);
            for (anchor, a) in model.anchors().iter().zip(model.coeffs()) {
                naive += kernel.eval_block(&x, anchor).unwrap() * a;
            }
            assert!((model.eval_h(&x).unwrap() - naive).amax() <= 1e-12);
        }
    }
}

/// Minimiser of the quadratic objective from its finite-difference Hessian.
fn quadratic_argmin(f: impl Fn(&DVector<f64>) -> f64, n: usize) -> DVector<f64> {
    let h = 1e-3;
    let zero = DVector::zeros(n);
    let f0 = f(&zero);
    let e = |i: usize| DVector::from_fn(n, |k, _| if k == i { h } else { 0.0 });
    let mut hess = DMatrix::zeros(n, n);
    let mut grad = DVector::zeros(n);
    for i in 0..n {
        grad[i] = (f(&e(i)) - f(&(-e(i)))) / (2.0 * h);
        for j in 0..n {
            hess[(i, j)] = (f(&(e(i) + e(j))) - f(&e(i)) - f(&e(j)) + f0) / (h * h);
        }
    }
    hess.lu().solve(&(-grad)).unwrap()
}

#[test]
fn multi_series_solvers_match_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let smoothers = vec![random_smoother(&mut rng, 2), random_smoother(&mut rng, 2)];
    let taus = regular_grid(0.5, 5.5, 3).unwrap();
    let kernel = OperatorKernel::decomposable(GaussianKernel::new(1.0).unwrap(), StructureMatrix::identity(2));
    let problem = MultiProblem::new(&smoothers, &taus, &kernel, 0.1, 0.5).unwrap();
    let oracle = quadratic_argmin(|a| problem.objective(a), problem.size());

    let direct = problem.solve_direct().unwrap();
    assert!((&direct - &oracle).amax() <= 1e-6, "{}", (&direct - &oracle).amax());

    let sgd = problem
        .solve_sgd(&SgdConfig {
            epochs: 400,
            ..Default::default()
        })
        .unwrap();
    let gap = problem.objective(&sgd) - problem.objective(&oracle);
    assert!(gap.abs() <= 1e-3, "{gap}");
}

#[test]
fn zero_coupling_is_independent_fits() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let smoothers: Vec<Smoother> = (0..3).map(|_| random_smoother(&mut rng, 2)).collect();
    let taus = regular_grid(0.5, 5.5, 10).unwrap();
    let kernel = OperatorKernel::decomposable(GaussianKernel::new(2.0).unwrap(), StructureMatrix::identity(2));
    let joint = fit_multi(&smoothers, &taus, &kernel, 0.1, 0.0, MultiSolver::Direct).unwrap();
    for (s, m) in smoothers.iter().zip(joint.models()) {
        let col = Collocation::new(s, &taus).unwrap();
        let single = fit_ridge_collocation(&col, &kernel, 0.1).unwrap();
        assert!((single.stacked_coeffs() - m.stacked_coeffs()).amax() <= 1e-8);
    }
}

#[test]
fn coupling_pulls_models_together() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let smoothers: Vec<Smoother> = (0..2).map(|_| random_smoother(&mut rng, 2)).collect();
    let taus = regular_grid(0.5, 5.5, 10).unwrap();
    let kernel = OperatorKernel::decomposable(GaussianKernel::new(2.0).unwrap(), StructureMatrix::identity(2));
    let mut last = f64::INFINITY;
    for sim in [0.0, 0.1, 1.0, 10.0] {
        let mm = fit_multi(&smoothers, &taus, &kernel, 0.1, sim, MultiSolver::Direct).unwrap();
        let d = mm.distance_squared(0, 1).unwrap();
        assert!(d <= last * (1.0 + 1e-9), "{sim}: {d} > {last}");
        last = d;
    }
}

proptest! {
    #[test]
    fn prox_l1_never_grows_entries(u in proptest::collection::vec(-5.0f64..5.0, 1..8), mu in 0.0f64..3.0) {
        let u = DVector::from_vec(u);
        let x = prox_l1(&u, mu);
        for (xi, ui) in x.iter().zip(u.iter()) {
            prop_assert!(xi.abs() <= ui.abs());
            prop_assert!(xi * ui >= 0.0);
            prop_assert!((ui - xi).abs() <= mu + 1e-12);
        }
    }

    #[test]
    fn prox_group_scales_each_block(u in proptest::collection::vec(-5.0f64..5.0, 6), mu in 0.0f64..3.0) {
        let u = DVector::from_vec(u);
        let groups = Groups::blocks(3, 2).unwrap();
        let x = prox_group(&u, mu, &groups).unwrap();
        for r in groups.ranges() {
            let ub = u.rows(r.start, r.len());
            let xb = x.rows(r.start, r.len());
            let expected = (1.0 - mu / ub.norm()).max(0.0);
            prop_assert!((xb - ub * expected).amax() <= 1e-12);
        }
    }

    #[test]
    fn sparse_group_prox_interpolates(u in proptest::collection::vec(-5.0f64..5.0, 4), lambda in 0.0f64..2.0) {
        let u = DVector::from_vec(u);
        let groups = Groups::blocks(2, 2).unwrap();
        prop_assert_eq!(prox_sparse_group(&u, lambda, 1.0, &groups).unwrap(), prox_l1(&u, lambda));
        prop_assert_eq!(prox_sparse_group(&u, lambda, 0.0, &groups).unwrap(), prox_group(&u, lambda, &groups).unwrap());
    }

    #[test]
    fn psd_projection_is_psd_and_idempotent(v in proptest::collection::vec(-3.0f64..3.0, 9)) {
        let m = DMatrix::from_vec(3, 3, v);
        let p = project_psd(&m).unwrap().into_matrix();
        prop_assert!(p.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        let again = project_psd(&p).unwrap().into_matrix();
        prop_assert!((again - &p).amax() <= 1e-10);
    }

    #[test]
    fn csv_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..10)) {
        let times: Vec<f64> = (0..rows.len()).map(|i| i as f64 * 0.25).collect();
        let ts = TimeSeries::from_rows(times, &rows).unwrap();
        prop_assert_eq!(TimeSeries::parse_csv(&ts.to_csv_string()).unwrap(), ts);
    }
}
