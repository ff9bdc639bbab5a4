use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_GRID: [&str; 4] = ["--gammas-h", "0.5,1", "--lambdas-h", "1e-2"];

fn gradmatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradmatch"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gradmatch(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    gradmatch(dir, args).status.code().unwrap()
}

fn report_value(report: &str, key: &str) -> Option<f64> {
    report.lines().find_map(|l| {
        let (k, v) = l.split_once(" = ")?;
        (k == key).then(|| v.parse().unwrap())
    })
}

fn simulated(dir: &Path) {
    ok(dir, &["simulate", "--prefix", "fhn"]);
}

fn fitted(dir: &Path) -> String {
    simulated(dir);
    let mut args = vec!["fit", "--input", "fhn_noisy.csv", "--out", "m.model", "--truth", "fhn_truth.csv"];
    args.extend(SMALL_GRID);
    ok(dir, &args)
}

#[test]
fn simulate_writes_deterministic_series() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let first = fs::read_to_string(dir.path().join("fhn_noisy.csv")).unwrap();
    assert_eq!(first.lines().count(), 42);
    assert_eq!(fs::read_to_string(dir.path().join("fhn_truth.csv")).unwrap().lines().count(), 42);
    simulated(dir.path());
    assert_eq!(first, fs::read_to_string(dir.path().join("fhn_noisy.csv")).unwrap());

    ok(dir.path(), &["simulate", "--prefix", "other", "--seed", "7"]);
    assert_ne!(first, fs::read_to_string(dir.path().join("other_noisy.csv")).unwrap());
}

#[test]
fn simulate_calcium_uses_its_own_defaults() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--model", "calcium", "--prefix", "ca"]);
    let noisy = fs::read_to_string(dir.path().join("ca_noisy.csv")).unwrap();
    assert_eq!(noisy.lines().count(), 68);
    assert_eq!(noisy.lines().next().unwrap().split(',').count(), 5);
}

#[test]
fn invalid_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["simulate", "--sigma2", "0"]), 2);
    assert_eq!(code(dir.path(), &["simulate", "--x0", "1,2,3"]), 2);
    assert_eq!(code(dir.path(), &["fit", "--input", "missing.csv", "--out", "m.model"]), 2);
    assert_eq!(code(dir.path(), &["no-such-command"]), 2);
    assert_eq!(code(dir.path(), &["--help"]), 0);
}

#[test]
fn fit_reports_metrics_and_saves_model() {
    let dir = tempfile::tempdir().unwrap();
    let report = fitted(dir.path());
    for key in ["gamma_h", "lambda_h", "smoothing_error", "gm_error", "trajectory_error", "trajectory_mse", "truth_trajectory_mse"] {
        let v = report_value(&report, key).unwrap_or_else(|| panic!("{key} missing from\n{report}"));
        assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
    }
    assert_eq!(report_value(&report, "trajectory_points"), Some(41.0));
    assert!(dir.path().join("m.model").exists());

    let traj = ok(dir.path(), &["trajectory", "--model", "m.model", "--x0", "-1,1", "--points", "11", "--horizon", "5"]);
    let rows: Vec<&str> = traj.lines().collect();
    assert_eq!(rows[0], "t,x1,x2");
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[1], "0,-1,1");
    assert_eq!(code(dir.path(), &["trajectory", "--model", "m.model", "--x0", "1"]), 2);
}

#[test]
fn sparse_and_kernel_learning_modes() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let mut args = vec![
        "fit", "--input", "fhn_noisy.csv", "--out", "s.model", "--mode", "sparse", "--lambda1", "1", "--alpha", "1",
        "--diagnostics", "trace.csv",
    ];
    args.extend(SMALL_GRID);
    let report = ok(dir.path(), &args);
    assert!(report_value(&report, "zero_coeff_fraction").unwrap() > 0.0);
    assert!(fs::read_to_string(dir.path().join("trace.csv")).unwrap().starts_with("iter,objective"));

    let mut args = vec!["fit", "--input", "fhn_noisy.csv", "--out", "k.model", "--mode", "kernel-learn", "--outer", "3"];
    args.extend(SMALL_GRID);
    let report = ok(dir.path(), &args);
    let c12 = report_value(&report, "c_1_2").unwrap();
    let c21 = report_value(&report, "c_2_1").unwrap();
    assert!((c12 - c21).abs() < 1e-12);

    let mut args = vec!["fit", "--input", "fhn_noisy.csv", "--out", "k.model", "--mode", "kernel-learn", "--family", "hadamard"];
    args.extend(SMALL_GRID);
    assert_eq!(code(dir.path(), &args), 2);
}

#[test]
fn multi_mode_needs_two_series() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    ok(dir.path(), &["simulate", "--prefix", "b", "--seed", "2", "--x0", "1.5,-0.5"]);
    let mut single = vec!["fit", "--mode", "multi", "--input", "fhn_noisy.csv", "--out", "mm.model"];
    single.extend(SMALL_GRID);
    assert_eq!(code(dir.path(), &single), 2);

    let mut args = vec!["fit", "--mode", "multi", "--input", "fhn_noisy.csv", "--input", "b_noisy.csv", "--out", "mm.model"];
    args.extend(SMALL_GRID);
    let report = ok(dir.path(), &args);
    assert_eq!(report_value(&report, "series"), Some(2.0));
    assert!(report_value(&report, "series2_trajectory_error").is_some());
    let traj = ok(dir.path(), &["trajectory", "--model", "mm.model", "--x0", "0,0", "--points", "3"]);
    assert_eq!(traj.lines().count(), 4);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    fs::write(dir.path().join("run.kv"), "# fit settings\ngammas-h = 0.5 1\nlambdas-h = 1e-2\nm = 51\n").unwrap();
    let report = ok(
        dir.path(),
        &["fit", "--config", "run.kv", "--input", "fhn_noisy.csv", "--out", "c.model", "--m", "41", "--scores", "scores.csv"],
    );
    assert_eq!(report_value(&report, "m"), Some(41.0));
    let scores = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 3);
    assert!(scores.starts_with("gamma_h,lambda_h,trajectory_error"));

    fs::write(dir.path().join("bad.kv"), "not-a-flag = 3\n").unwrap();
    assert_eq!(code(dir.path(), &["fit", "--config", "bad.kv", "--input", "fhn_noisy.csv", "--out", "c.model"]), 2);
}

#[test]
fn zero_model_trajectory_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    // a huge ridge shrinks h to zero
    let report = ok(
        dir.path(),
        &["fit", "--input", "fhn_noisy.csv", "--out", "z.model", "--gamma-h", "1", "--lambda-h", "1e12", "--m", "21"],
    );
    assert!(report_value(&report, "trajectory_mse").is_some());
    let traj = ok(dir.path(), &["trajectory", "--model", "z.model", "--x0", "0.3,-0.7", "--points", "6"]);
    for row in traj.lines().skip(1) {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[1] - 0.3).abs() < 1e-6 && (v[2] + 0.7).abs() < 1e-6, "{row}");
    }
}

#[test]
fn error_map_and_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fitted(dir.path());
    let map = ok(dir.path(), &["error-map", "--model", "m.model", "--v-steps", "1", "--r-steps", "1", "--v-min", "-1", "--r-min", "1"]);
    let rows: Vec<&str> = map.lines().collect();
    assert_eq!(rows, ["v,r,error", rows[1]]);
    assert!(rows[1].starts_with("-1,1,"));
    let map = ok(dir.path(), &["error-map", "--model", "m.model", "--v-steps", "2", "--r-steps", "3", "--points", "5", "--horizon", "2"]);
    assert_eq!(map.lines().count(), 7);

    let mut args = vec!["sweep-alpha", "--input", "fhn_noisy.csv", "--alphas", "0,1", "--lambda1s", "0.1,1", "--m", "31"];
    args.extend(SMALL_GRID);
    let csv = ok(dir.path(), &args);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "alpha,lambda1,trajectory_error,zero_coeff_fraction,zero_group_fraction,converged");
    assert_eq!(rows.len(), 5);
    assert_eq!(code(dir.path(), &["sweep-alpha", "--input", "fhn_noisy.csv", "--alphas", "2"]), 2);
}

#[test]
fn compare_lists_three_methods() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let mut args = vec!["compare", "--input", "fhn_noisy.csv", "--truth", "fhn_truth.csv", "--restarts", "2", "--m", "31"];
    args.extend(SMALL_GRID);
    let csv = ok(dir.path(), &args);
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "method,mse,parameters");
    let methods: Vec<&str> = body[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["two-step", "parametric-3", "parametric-14"]);
}
