use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::ValueEnum;
use gradmatch::model_io::SavedModel;
use gradmatch::simulate::{error_map_cell, ErrorMapSpec, FhnParams, MapMetric};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::common::{emit, num};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Mse,
    Sse,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Learned model (single or multi-series consensus).
    #[arg(long)]
    pub model: PathBuf,
    /// FHN parameter file for the reference system; defaults otherwise.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true, default_value_t = -2.5)]
    pub v_min: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 2.5)]
    pub v_max: f64,
    #[arg(long, default_value_t = 11)]
    pub v_steps: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = -2.5)]
    pub r_min: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 2.5)]
    pub r_max: f64,
    #[arg(long, default_value_t = 11)]
    pub r_steps: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 20.0)]
    pub horizon: f64,
    /// Comparison points on `[0, horizon]`.
    #[arg(long, default_value_t = 41)]
    pub points: usize,
    #[arg(long, default_value_t = 20)]
    pub substeps: usize,
    #[arg(long, value_enum, default_value = "mse")]
    pub metric: Metric,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output CSV with one `v,r,error` row per cell [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn axis(lo: f64, hi: f64, steps: usize) -> anyhow::Result<Vec<f64>> {
    match steps {
        0 => bail!("grid needs at least one step"),
        1 => Ok(vec![lo]),
        _ if hi < lo => bail!("grid bounds reversed: {lo} > {hi}"),
        _ => Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()),
    }
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let model = SavedModel::load(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    if model.dim() != 2 {
        bail!("error maps need a 2-dimensional model, got dimension {}", model.dim());
    }
    let truth = match &args.params {
        Some(p) => FhnParams::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => FhnParams::default(),
    };
    let spec = ErrorMapSpec {
        v_grid: axis(args.v_min, args.v_max, args.v_steps)?,
        r_grid: axis(args.r_min, args.r_max, args.r_steps)?,
        horizon: args.horizon,
        points: args.points,
        substeps: args.substeps,
        metric: match args.metric {
            Metric::Mse => MapMetric::Mse,
            Metric::Sse => MapMetric::Sse,
        },
    };
    spec.validate()?;
    let cells: Vec<(f64, f64)> = spec
        .v_grid
        .iter()
        .flat_map(|&v| spec.r_grid.iter().map(move |&r| (v, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let errors = pool.install(|| {
        cells
            .par_iter()
            .map(|&(v, r)| error_map_cell(&model, &truth, &DVector::from_vec(vec![v, r]), &spec))
            .collect::<gradmatch::error::Result<Vec<f64>>>()
    })?;
    let mut csv = String::from("v,r,error\n");
    for ((v, r), e) in cells.iter().zip(&errors) {
        csv.push_str(&format!("{v},{r},{}\n", num(*e)));
    }
    let finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    eprintln!(
        "{} cells, {} blew up, mean error {}",
        errors.len(),
        errors.len() - finite.len(),
        num(errors.iter().sum::<f64>() / errors.len() as f64)
    );
    emit(args.out.as_ref(), &csv)
}
