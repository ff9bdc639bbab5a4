use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use gradmatch::matching::TauMode;
use gradmatch::operator::KernelFamily;
use gradmatch::pipeline::{CandidateScore, ModelSpec, Step2Grid, TwoStepConfig};
use gradmatch::simulate::TrajectoryMode;
use gradmatch::smoother::CvGrid;
use gradmatch::timeseries::TimeSeries;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Decomposable,
    Transformable,
    Hadamard,
}

impl From<Family> for KernelFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Decomposable => KernelFamily::Decomposable,
            Family::Transformable => KernelFamily::Transformable,
            Family::Hadamard => KernelFamily::Hadamard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Tau {
    Regular,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrajMode {
    /// Integrate the learned field from g(t0).
    #[value(name = "self")]
    SelfConsistent,
    /// Integrate the learned field along the smoothed path.
    Along,
}

/// Step 1 and Step 2 settings shared by `fit`, `sweep-alpha` and `compare`.
#[derive(Debug, Clone, clap::Args)]
pub struct PipelineArgs {
    /// Number of collocation times.
    #[arg(long, default_value_t = 101)]
    pub m: usize,
    #[arg(long, value_enum, default_value = "regular")]
    pub tau: Tau,
    /// Seed for random collocation times.
    #[arg(long, default_value_t = 0)]
    pub tau_seed: u64,
    /// Smoother kernel widths for leave-one-out selection.
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Smoother ridge values for leave-one-out selection.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Vector-field kernel widths searched in Step 2.
    #[arg(long, value_delimiter = ',')]
    pub gammas_h: Option<Vec<f64>>,
    /// Vector-field ridge values searched in Step 2.
    #[arg(long, value_delimiter = ',')]
    pub lambdas_h: Option<Vec<f64>>,
    /// Fix the vector-field kernel width instead of searching.
    #[arg(long)]
    pub gamma_h: Option<f64>,
    /// Fix the vector-field ridge instead of searching.
    #[arg(long)]
    pub lambda_h: Option<f64>,
    #[arg(long, value_enum, default_value = "decomposable")]
    pub family: Family,
    /// RK4 substeps per observation interval.
    #[arg(long, default_value_t = 20)]
    pub substeps: usize,
    #[arg(long, value_enum, default_value = "self")]
    pub traj_mode: TrajMode,
    /// Worker threads for grid searches (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

impl PipelineArgs {
    pub fn config(&self) -> anyhow::Result<TwoStepConfig> {
        let cv = CvGrid::default();
        let cv_grid = CvGrid {
            gammas: self.gammas.clone().unwrap_or(cv.gammas),
            lambdas: self.lambdas.clone().unwrap_or(cv.lambdas),
        };
        let s2 = Step2Grid::default();
        let step2 = Step2Grid {
            gammas: self.gamma_h.map(|g| vec![g]).or_else(|| self.gammas_h.clone()).unwrap_or(s2.gammas),
            ridges: self.lambda_h.map(|l| vec![l]).or_else(|| self.lambdas_h.clone()).unwrap_or(s2.ridges),
        };
        for v in cv_grid.gammas.iter().chain(&cv_grid.lambdas).chain(&step2.gammas).chain(&step2.ridges) {
            if !(*v > 0.0 && v.is_finite()) {
                bail!("grid values must be positive and finite, got {v}");
            }
        }
        if self.substeps == 0 {
            bail!("--substeps must be at least 1");
        }
        Ok(TwoStepConfig {
            cv_grid,
            step2,
            m: self.m,
            tau_mode: match self.tau {
                Tau::Regular => TauMode::Regular,
                Tau::Random => TauMode::UniformRandom { seed: self.tau_seed },
            },
            spec: ModelSpec {
                family: self.family.into(),
                structure: None,
            },
            substeps: self.substeps,
            mode: match self.traj_mode {
                TrajMode::SelfConsistent => TrajectoryMode::SelfConsistent,
                TrajMode::Along => TrajectoryMode::AlongG,
            },
        })
    }

    pub fn pool(&self) -> anyhow::Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .context("starting worker threads")
    }
}

/// Order-preserving parallel map for the core's `*_with` hooks.
pub fn par_scores<'s>(
    points: &[(f64, f64)],
    score: &(dyn Fn(f64, f64) -> gradmatch::error::Result<CandidateScore> + Sync + 's),
) -> Vec<gradmatch::error::Result<CandidateScore>> {
    points.par_iter().map(|&(g, r)| score(g, r)).collect()
}

pub fn read_series(path: &Path) -> anyhow::Result<TimeSeries> {
    TimeSeries::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&PathBuf>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn scores_csv(scores: &[CandidateScore]) -> String {
    let mut s = String::from("gamma_h,lambda_h,trajectory_error\n");
    for c in scores {
        s.push_str(&format!("{},{},{}\n", c.gamma, c.ridge, c.trajectory_error));
    }
    s
}

/// Numeric CSV cell; infinities written as `inf`.
pub fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}
