use std::path::PathBuf;

use anyhow::{bail, Context};
use gradmatch::pipeline::{fit_two_step_with, sweep_alpha, SweepRow};
use gradmatch::simulate::{trajectory_error, TrajectoryMode};
use gradmatch::sparse::{SparseConfig, SparseProblem};
use rayon::prelude::*;

use crate::common::{emit, num, par_scores, read_series, PipelineArgs};

/// Sweep rows with the optional MSE against the noiseless reference.
type Rows = Vec<(SweepRow, Option<f64>)>;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub input: PathBuf,
    /// Noiseless reference; adds a `truth_mse` column.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-3,1e-2,1e-1,1,10,100")]
    pub lambda1s: Vec<f64>,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub zero_tol: f64,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cfg = args.pipeline.config()?;
    let ts = read_series(&args.input)?;
    let truth = args.truth.as_ref().map(|p| read_series(p)).transpose()?;
    if args.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        bail!("--alphas must lie in [0, 1]");
    }
    if args.lambda1s.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        bail!("--lambda1s must be non-negative");
    }
    let base = SparseConfig {
        max_iters: args.max_iters,
        tol: args.tol,
        ..Default::default()
    };
    base.validate()?;

    let pool = args.pipeline.pool()?;
    let rows = pool.install(|| -> anyhow::Result<Rows> {
        let fit = fit_two_step_with(&ts, &cfg, par_scores).context("two-step fit for the dense model")?;
        let chosen = *fit.chosen_score();
        let kernel = cfg.spec.kernel(chosen.gamma, ts.dim())?;
        let problem = SparseProblem::new(fit.prepared.collocation.clone(), &kernel, chosen.ridge)?;
        let s = &fit.prepared.smoother;
        let per_alpha: Vec<anyhow::Result<Rows>> = args
            .alphas
            .par_iter()
            .map(|&alpha| {
                let mut truth_scores = Vec::new();
                let rows = sweep_alpha(&problem, &[alpha], &args.lambda1s, &base, args.zero_tol, |m| {
                    let err = |series| {
                        trajectory_error(m, s, series, TrajectoryMode::SelfConsistent, cfg.substeps)
                            .map(|r| if r.complete() { r.error } else { f64::INFINITY })
                            .unwrap_or(f64::INFINITY)
                    };
                    if let Some(t) = &truth {
                        truth_scores.push(err(t) / (t.len() * t.dim()) as f64);
                    }
                    err(&ts)
                })?;
                Ok(rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| (r, truth_scores.get(i).copied()))
                    .collect())
            })
            .collect();
        per_alpha.into_iter().collect::<anyhow::Result<Vec<_>>>().map(|v| v.concat())
    })?;

    let mut csv = String::from("alpha,lambda1,trajectory_error,zero_coeff_fraction,zero_group_fraction,converged");
    if truth.is_some() {
        csv.push_str(",truth_mse");
    }
    csv.push('\n');
    for (r, t) in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}",
            r.alpha,
            r.lambda1,
            num(r.score),
            r.zero_coeff_fraction,
            r.zero_group_fraction,
            r.converged
        ));
        if let Some(t) = t {
            csv.push_str(&format!(",{}", num(t)));
        }
        csv.push('\n');
    }
    emit(args.out.as_ref(), &csv)
}
