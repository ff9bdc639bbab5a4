use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::ValueEnum;
use gradmatch::field::VectorField;
use gradmatch::simulate::{
    add_noise, regular_grid, simulate, CalciumParams, FhnParams, NoiseMode, NoiseSpec, CALCIUM_HORIZON, CALCIUM_INITIAL,
    CALCIUM_SUBSTEPS,
};
use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Fhn,
    Calcium,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Noise {
    Gaussian,
    /// Gaussian noise with negative observations clamped to zero.
    Truncated,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, value_enum, default_value = "fhn")]
    pub model: Model,
    /// Parameter file (`key = value`); built-in defaults otherwise.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Number of observations [default: 41 for fhn, 67 for calcium].
    #[arg(long)]
    pub n: Option<usize>,
    /// Final time [default: 20 for fhn, 30 for calcium].
    #[arg(long, allow_negative_numbers = true)]
    pub horizon: Option<f64>,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
    /// Noise variance.
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.1)]
    pub sigma2: f64,
    /// [default: gaussian for fhn, truncated for calcium]
    #[arg(long, value_enum)]
    pub noise: Option<Noise>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// RK4 substeps per interval [default: 20 for fhn, 400 for calcium].
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// File name prefix [default: the model name].
    #[arg(long)]
    pub prefix: Option<String>,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if !(args.sigma2 > 0.0 && args.sigma2.is_finite()) {
        bail!("--sigma2 must be positive, got {}", args.sigma2);
    }
    let (field, n, horizon, x0, noise, substeps, name): (Box<dyn VectorField>, _, _, Vec<f64>, _, _, _) = match args.model {
        Model::Fhn => {
            let p = match &args.params {
                Some(path) => FhnParams::load(path).with_context(|| format!("reading {}", path.display()))?,
                None => FhnParams::default(),
            };
            (Box::new(p), 41, 20.0, vec![-1.0, 1.0], Noise::Gaussian, 20, "fhn")
        }
        Model::Calcium => {
            let p = match &args.params {
                Some(path) => CalciumParams::load(path).with_context(|| format!("reading {}", path.display()))?,
                None => CalciumParams::default(),
            };
            (Box::new(p), 67, CALCIUM_HORIZON, CALCIUM_INITIAL.to_vec(), Noise::Truncated, CALCIUM_SUBSTEPS, "calcium")
        }
    };
    let x0 = args.x0.unwrap_or(x0);
    let dim = if args.model == Model::Fhn { 2 } else { 4 };
    if x0.len() != dim {
        bail!("--x0 needs {dim} values, got {}", x0.len());
    }
    let grid = regular_grid(0.0, args.horizon.unwrap_or(horizon), args.n.unwrap_or(n))?;
    let truth = simulate(field.as_ref(), &DVector::from_vec(x0), &grid, args.substeps.unwrap_or(substeps))
        .context("simulating the reference trajectory")?;
    let noisy = add_noise(
        &truth,
        &NoiseSpec {
            variance: args.sigma2,
            mode: match args.noise.unwrap_or(noise) {
                Noise::Gaussian => NoiseMode::Gaussian,
                Noise::Truncated => NoiseMode::ZeroTruncated,
            },
            seed: args.seed,
        },
    )?;

    let prefix = args.prefix.unwrap_or_else(|| name.to_string());
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let truth_path = args.out_dir.join(format!("{prefix}_truth.csv"));
    let noisy_path = args.out_dir.join(format!("{prefix}_noisy.csv"));
    truth.write_csv(&truth_path).with_context(|| format!("writing {}", truth_path.display()))?;
    noisy.write_csv(&noisy_path).with_context(|| format!("writing {}", noisy_path.display()))?;
    eprintln!("wrote {} and {}", truth_path.display(), noisy_path.display());
    Ok(())
}
