use std::path::PathBuf;

use anyhow::{bail, Context};
use gradmatch::parametric::{fit_parametric_with, simulate_family, ParametricFamily, ParametricOptions, RestartRecord};
use gradmatch::pipeline::fit_two_step_with;
use gradmatch::simulate::{trajectory_error, TrajectoryMode};
use gradmatch::timeseries::TimeSeries;
use rayon::prelude::*;

use crate::common::{emit, num, par_scores, read_series, PipelineArgs};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Observed planar series.
    #[arg(long)]
    pub input: PathBuf,
    /// Noiseless reference; errors are measured against the observations otherwise.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

fn planar_mse(traj: &[[f64; 2]], reference: &TimeSeries) -> f64 {
    let y = reference.values();
    let sse: f64 = traj
        .iter()
        .enumerate()
        .map(|(l, x)| (x[0] - y[(l, 0)]).powi(2) + (x[1] - y[(l, 1)]).powi(2))
        .sum();
    sse / (reference.len() * 2) as f64
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cfg = args.pipeline.config()?;
    let ts = read_series(&args.input)?;
    if ts.dim() != 2 {
        bail!("compare needs a planar series, got dimension {}", ts.dim());
    }
    let truth = args.truth.as_ref().map(|p| read_series(p)).transpose()?;
    let reference = truth.as_ref().unwrap_or(&ts);
    if reference.times() != ts.times() {
        bail!("--truth must share the observation times of --input");
    }
    if args.restarts == 0 {
        bail!("--restarts must be at least 1");
    }
    let opts = ParametricOptions {
        restarts: args.restarts,
        seed: args.seed,
        substeps: cfg.substeps,
        ..Default::default()
    };

    let pool = args.pipeline.pool()?;
    let rows = pool.install(|| -> anyhow::Result<Vec<(String, f64, String)>> {
        let fit = fit_two_step_with(&ts, &cfg, par_scores).context("two-step fit")?;
        let r = trajectory_error(&fit.model, &fit.prepared.smoother, reference, TrajectoryMode::SelfConsistent, cfg.substeps)?;
        let chosen = fit.chosen_score();
        let mut rows = vec![(
            "two-step".to_string(),
            if r.complete() { r.mse() } else { f64::INFINITY },
            format!("gamma_h={} lambda_h={}", chosen.gamma, chosen.ridge),
        )];
        let y0 = [ts.values()[(0, 0)], ts.values()[(0, 1)]];
        for (name, family) in [("parametric-3", ParametricFamily::Fhn3), ("parametric-14", ParametricFamily::Cubic14)] {
            let pf = match fit_parametric_with(family, &ts, &opts, |starts, run: &(dyn Fn(&[f64]) -> RestartRecord + Sync)| {
                starts.par_iter().map(|s| run(s)).collect()
            }) {
                Ok(pf) => pf,
                Err(e) if e.is_numerical() => {
                    eprintln!("{name}: {e}");
                    rows.push((name.to_string(), f64::INFINITY, "diverged".to_string()));
                    continue;
                }
                Err(e) => return Err(anyhow::Error::new(e).context(format!("{name} fit"))),
            };
            let mse = simulate_family(family, &pf.params, y0, reference.times(), cfg.substeps).map_or(f64::INFINITY, |t| planar_mse(&t, reference));
            let params: Vec<String> = pf.params.iter().map(|p| format!("{p}")).collect();
            rows.push((name.to_string(), mse, params.join(" ")));
        }
        Ok(rows)
    })?;

    let mut csv = String::from("# profiled-estimation baseline not included\n");
    csv.push_str(&format!(
        "# errors against {}\n",
        if truth.is_some() { "the noiseless reference" } else { "the observations" }
    ));
    csv.push_str("method,mse,parameters\n");
    for (name, mse, params) in rows {
        csv.push_str(&format!("{name},{},{params}\n", num(mse)));
    }
    emit(args.out.as_ref(), &csv)
}
