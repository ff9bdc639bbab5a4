use std::path::PathBuf;

use anyhow::{bail, Context};
use gradmatch::model_io::SavedModel;
use gradmatch::simulate::{regular_grid, simulate};
use nalgebra::DVector;

use crate::common::emit;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub model: PathBuf,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',', required = true)]
    pub x0: Vec<f64>,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
    pub start: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 20.0)]
    pub horizon: f64,
    /// Output points on `[start, start + horizon]`.
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    #[arg(long, default_value_t = 20)]
    pub substeps: usize,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let model = SavedModel::load(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    if args.x0.len() != model.dim() {
        bail!("--x0 needs {} values for this model, got {}", model.dim(), args.x0.len());
    }
    let grid = regular_grid(args.start, args.start + args.horizon, args.points)?;
    let ts = simulate(&model, &DVector::from_vec(args.x0), &grid, args.substeps).context("integrating the model")?;
    emit(args.out.as_ref(), &ts.to_csv_string())
}
