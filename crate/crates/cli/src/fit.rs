use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::ValueEnum;
use gradmatch::kernel::GaussianKernel;
use gradmatch::kernel_learn::{alternate_fit, KernelLearnConfig};
use gradmatch::matching::{MultiSolver, SgdConfig};
use gradmatch::model_io::SavedModel;
use gradmatch::operator::KernelFamily;
use gradmatch::pipeline::{fit_multi_two_step, fit_two_step_with, report_two_step, FitReport, TwoStepConfig, TwoStepFit};
use gradmatch::simulate::{trajectory_error, TrajectoryMode};
use gradmatch::sparse::{SparseConfig, SparseProblem};
use gradmatch::timeseries::TimeSeries;

use crate::common::{emit, par_scores, read_series, scores_csv, PipelineArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Ridge,
    Sparse,
    KernelLearn,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Direct,
    Sgd,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Observed series (CSV); repeat for `--mode multi`.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Where to write the fitted model.
    #[arg(long)]
    pub out: PathBuf,
    /// Key-value report [default: stdout].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Step 2 grid scores as CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Optimiser trace as CSV (sparse and kernel-learn modes).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// Noiseless reference series; adds its trajectory MSE to the report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ridge")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0.0)]
    pub lambda1: f64,
    /// Weight of the l1 part of the sparse penalty (1 = pure l1, 0 = pure group).
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Coefficients below this magnitude count as zero in the report.
    #[arg(long, default_value_t = 1e-8)]
    pub zero_tol: f64,
    #[arg(long, default_value_t = 10)]
    pub outer: usize,
    #[arg(long, default_value_t = 50)]
    pub inner: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_sim: f64,
    #[arg(long, value_enum, default_value = "direct")]
    pub solver: Solver,
    #[arg(long, default_value_t = 10)]
    pub sgd_batch: usize,
    #[arg(long, default_value_t = 20)]
    pub sgd_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cfg = args.pipeline.config()?;
    let series = args.input.iter().map(|p| read_series(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let truth = args.truth.as_ref().map(|p| read_series(p)).transpose()?;
    if args.mode != Mode::Multi && series.len() != 1 {
        bail!("--mode {:?} takes exactly one --input, got {}", args.mode, series.len());
    }
    if args.mode == Mode::KernelLearn && cfg.spec.family != KernelFamily::Decomposable {
        bail!("--mode kernel-learn requires --family decomposable");
    }
    let pool = args.pipeline.pool()?;
    pool.install(|| match args.mode {
        Mode::Multi => fit_multi_mode(&args, &cfg, &series, truth.as_ref()),
        _ => fit_single(&args, &cfg, &series[0], truth.as_ref()),
    })
}

fn truth_metric<F: gradmatch::field::VectorField + ?Sized>(
    report: &mut FitReport,
    key: &str,
    field: &F,
    smoother: &gradmatch::smoother::Smoother,
    truth: &TimeSeries,
    cfg: &TwoStepConfig,
) -> anyhow::Result<()> {
    let r = trajectory_error(field, smoother, truth, TrajectoryMode::SelfConsistent, cfg.substeps)?;
    report.push(key, if r.complete() { r.mse() } else { f64::INFINITY });
    Ok(())
}

fn fit_single(args: &Args, cfg: &TwoStepConfig, ts: &TimeSeries, truth: Option<&TimeSeries>) -> anyhow::Result<()> {
    let fit: TwoStepFit = fit_two_step_with(ts, cfg, par_scores).context("two-step fit")?;
    if let Some(p) = &args.scores {
        emit(Some(p), &scores_csv(&fit.scores))?;
    }
    let chosen = *fit.chosen_score();
    let s = &fit.prepared.smoother;
    let taus = &fit.prepared.taus;

    let (model, mut report) = match args.mode {
        Mode::Ridge => (fit.model.clone(), report_two_step(&fit, ts, cfg)?),
        Mode::Sparse => {
            let sc = SparseConfig {
                lambda1: args.lambda1,
                alpha: args.alpha,
                max_iters: args.max_iters,
                tol: args.tol,
            };
            sc.validate()?;
            let kernel = cfg.spec.kernel(chosen.gamma, ts.dim())?;
            let problem = SparseProblem::new(fit.prepared.collocation.clone(), &kernel, chosen.ridge)?;
            let (a, diag) = problem.solve(&sc, None, args.diagnostics.is_some()).context("sparse fit")?;
            if let Some(p) = &args.diagnostics {
                emit(Some(p), &diag.to_csv())?;
            }
            let model = problem.to_model(&a)?;
            let mut r = header(cfg, &fit);
            r.push("lambda1", sc.lambda1);
            r.push("alpha", sc.alpha);
            r.push("iterations", diag.iterations);
            r.push("converged", diag.converged);
            r.push("objective", diag.final_objective);
            r.add_metrics("", &model, s, ts, taus, cfg.mode, cfg.substeps)?;
            r.add_sparsity(&model, args.zero_tol);
            (model, r)
        }
        Mode::KernelLearn => {
            let kl = KernelLearnConfig {
                outer_iters: args.outer,
                inner_iters: args.inner,
                ..Default::default()
            };
            let (model, c, rep) = alternate_fit(s, taus, &GaussianKernel::new(chosen.gamma)?, chosen.ridge, &kl).context("kernel learning")?;
            if let Some(p) = &args.diagnostics {
                let mut csv = String::from("step,objective\n");
                for (i, o) in rep.objectives.iter().enumerate() {
                    csv.push_str(&format!("{i},{o}\n"));
                }
                emit(Some(p), &csv)?;
            }
            let mut r = header(cfg, &fit);
            r.push("outer_iterations", rep.outer_iters);
            r.push("final_objective", rep.objectives.last().copied().unwrap_or(f64::NAN));
            let m = c.matrix();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    r.push(format!("c_{}_{}", i + 1, j + 1), m[(i, j)]);
                }
            }
            r.add_metrics("", &model, s, ts, taus, cfg.mode, cfg.substeps)?;
            (model, r)
        }
        Mode::Multi => unreachable!("handled by fit_multi_mode"),
    };
    if let Some(t) = truth {
        truth_metric(&mut report, "truth_trajectory_mse", &model, s, t, cfg)?;
    }
    SavedModel::Single(model)
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    emit(args.report.as_ref(), &report.to_text())
}

fn header(cfg: &TwoStepConfig, fit: &TwoStepFit) -> FitReport {
    let mut r = FitReport::default();
    r.push("family", cfg.spec.family);
    r.push("m", fit.model.len());
    r.push("gamma_h", fit.chosen_score().gamma);
    r.push("lambda_h", fit.chosen_score().ridge);
    r.add_selections("", &fit.prepared.selections);
    r
}

fn fit_multi_mode(args: &Args, cfg: &TwoStepConfig, series: &[TimeSeries], truth: Option<&TimeSeries>) -> anyhow::Result<()> {
    if series.len() < 2 {
        bail!("--mode multi needs at least 2 --input series, got {}", series.len());
    }
    if truth.is_some() {
        bail!("--truth is only supported for single-series fits");
    }
    let solver = match args.solver {
        Solver::Direct => MultiSolver::Direct,
        Solver::Sgd => MultiSolver::Sgd(SgdConfig {
            batch: args.sgd_batch,
            epochs: args.sgd_epochs,
            seed: args.seed,
        }),
    };
    let fit = fit_multi_two_step(series, cfg, args.lambda_sim, solver, par_scores).context("multi-series fit")?;
    if let Some(p) = &args.scores {
        emit(Some(p), &scores_csv(&fit.scores))?;
    }
    let chosen = fit.scores[fit.chosen];
    let mut r = FitReport::default();
    r.push("family", cfg.spec.family);
    r.push("series", series.len());
    r.push("m", fit.model.models()[0].len());
    r.push("gamma_h", chosen.gamma);
    r.push("lambda_h", chosen.ridge);
    r.push("lambda_sim", args.lambda_sim);
    r.push("total_trajectory_error", chosen.trajectory_error);
    let consensus = fit.model.consensus();
    for (i, (p, ts)) in fit.prepared.iter().zip(series).enumerate() {
        let prefix = format!("series{}_", i + 1);
        r.add_selections(&prefix, &p.selections);
        r.add_metrics(&prefix, &consensus, &p.smoother, ts, &p.taus, cfg.mode, cfg.substeps)?;
    }
    SavedModel::Multi(fit.model)
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    emit(args.report.as_ref(), &r.to_text())
}
