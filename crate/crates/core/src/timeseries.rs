//! Observed trajectories and their CSV representation.
//!
//! The interchange format is a header row `t,x1,...,xp` followed by one
//! numeric row per observation. Reading accepts LF or CRLF line endings;
//! writing always emits LF and the shortest decimal representation that
//! round-trips each `f64` exactly.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An `n`-length, `p`-dimensional time series: strictly increasing times and
/// one row of state observations per time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::validation(format!(
                "a time series needs at least 2 observations, got {}",
                times.len()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::validation("a time series needs at least one state variable"));
        }
        if values.nrows() != times.len() {
            return Err(Error::validation(format!(
                "{} times but {} observation rows",
                times.len(),
                values.nrows()
            )));
        }
        if let Some(bad) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::validation(format!("time {bad} is not finite")));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::validation(format!(
                "times must be strictly increasing: t[{}] = {} is not below t[{}] = {}",
                i,
                times[i],
                i + 1,
                times[i + 1]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("observations must be finite"));
        }
        Ok(Self { times, values })
    }

    /// Builds a series from row vectors, one per time point.
    pub fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::validation("ragged observation rows"));
        }
        let values = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Number of observations `n`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// State dimension `p`.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Observation `y_i` as a column vector.
    pub fn observation(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    /// All observations of variable `j`.
    pub fn variable(&self, j: usize) -> DVector<f64> {
        self.values.column(j).into_owned()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());

        let headers = reader.headers().map_err(csv_error)?.clone();
        if headers.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                msg: "header must be `t,x1,...,xp` with at least one state column".into(),
            });
        }
        if &headers[0] != "t" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("first header column must be `t`, found `{}`", &headers[0]),
            });
        }

        let mut times = Vec::new();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let mut fields = record.iter().map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("`{f}` is not a number ({e})"),
                })
            });
            let t = fields.next().transpose()?.ok_or(Error::Parse {
                line,
                msg: "empty row".into(),
            })?;
            times.push(t);
            rows.push(fields.collect::<Result<Vec<f64>>>()?);
        }
        Self::from_rows(times, &rows)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t");
        for j in 1..=self.dim() {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for v in self.values.row(i).iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// `r` time series observed from different initial conditions on a shared
/// time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesBundle {
    series: Vec<TimeSeries>,
}

impl TimeSeriesBundle {
    pub fn new(series: Vec<TimeSeries>) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::validation("a bundle needs at least one series"))?;
        for (i, s) in series.iter().enumerate().skip(1) {
            if s.dim() != first.dim() {
                return Err(Error::validation(format!(
                    "series {i} has dimension {} but series 0 has {}",
                    s.dim(),
                    first.dim()
                )));
            }
            if s.len() != first.len() {
                return Err(Error::validation(format!(
                    "series {i} has {} observations but series 0 has {}",
                    s.len(),
                    first.len()
                )));
            }
        }
        Ok(Self { series })
    }

    pub fn series(&self) -> &[TimeSeries] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.series[0].dim()
    }
}
