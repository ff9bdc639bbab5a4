//! Text serialisation of fitted models.
//!
//! ```text
//! format = gradmatch-model
//! version = 1
//! family = decomposable
//! gamma = 0.5
//! ridge = 0.01
//! count = 2
//! sim_weight = 0.1
//! [structure 2 2]
//! 1 0
//! 0 1
//! [anchors.1 3 2]
//! ...
//! [coeffs.1 3 2]
//! ...
//! [anchors.2 3 2]
//! ...
//! ```
//!
//! `key = value` lines come first, then matrix blocks `[name rows cols]`
//! each followed by `rows` lines of `cols` whitespace-separated numbers. The
//! structure block is present only for families that use one, `sim_weight`
//! only when `count > 1`. Numbers use the shortest representation that
//! parses back to the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::kernel::GaussianKernel;
use crate::kv::parse_f64;
use crate::matching::{MultiModel, OdeModel};
use crate::operator::{KernelFamily, OperatorKernel, StructureMatrix};

const FORMAT: &str = "gradmatch-model";
const VERSION: &str = "1";

/// A loaded model file: one model, or several evaluated as their average.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Single(OdeModel),
    Multi(MultiModel),
}

impl SavedModel {
    pub fn models(&self) -> &[OdeModel] {
        match self {
            Self::Single(m) => std::slice::from_ref(m),
            Self::Multi(mm) => mm.models(),
        }
    }

    pub fn dim(&self) -> usize {
        self.models()[0].dim()
    }

    pub fn kernel(&self) -> &OperatorKernel {
        self.models()[0].kernel()
    }

    pub fn to_text(&self) -> String {
        match self {
            Self::Single(m) => write_models(std::slice::from_ref(m), None),
            Self::Multi(mm) => write_models(mm.models(), Some(mm.sim_weight())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        parse_model(&std::fs::read_to_string(path)?)
    }
}

impl VectorField for SavedModel {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Single(m) => m.eval(x),
            Self::Multi(mm) => mm.consensus().eval(x),
        }
    }
}

fn write_matrix(out: &mut String, name: &str, rows: usize, cols: usize, entry: impl Fn(usize, usize) -> f64) {
    let _ = writeln!(out, "[{name} {rows} {cols}]");
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| format!("{}", entry(i, j))).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

fn write_models(models: &[OdeModel], sim_weight: Option<f64>) -> String {
    let first = &models[0];
    let kernel = first.kernel();
    let mut out = String::new();
    let _ = writeln!(out, "format = {FORMAT}");
    let _ = writeln!(out, "version = {VERSION}");
    let _ = writeln!(out, "family = {}", kernel.family());
    let _ = writeln!(out, "gamma = {}", kernel.scalar().gamma());
    let _ = writeln!(out, "ridge = {}", first.ridge());
    let _ = writeln!(out, "count = {}", models.len());
    if let Some(w) = sim_weight {
        let _ = writeln!(out, "sim_weight = {w}");
    }
    if let Some(c) = kernel.structure() {
        let m = c.matrix();
        write_matrix(&mut out, "structure", m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    }
    for (idx, model) in models.iter().enumerate() {
        let p = model.dim();
        write_matrix(&mut out, &format!("anchors.{}", idx + 1), model.len(), p, |i, j| model.anchors()[i][j]);
        write_matrix(&mut out, &format!("coeffs.{}", idx + 1), model.len(), p, |i, j| model.coeffs()[i][j]);
    }
    out
}

pub fn model_to_text(model: &OdeModel) -> String {
    write_models(std::slice::from_ref(model), None)
}

pub fn multi_to_text(mm: &MultiModel) -> String {
    write_models(mm.models(), Some(mm.sim_weight()))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn parse_model(text: &str) -> Result<SavedModel> {
    let mut keys: BTreeMap<String, (String, usize)> = BTreeMap::new();
    let mut blocks: BTreeMap<String, (DMatrix<f64>, usize)> = BTreeMap::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    while let Some((no, line)) = lines.next() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| parse_err(no, "unterminated block header"))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(parse_err(no, "block header must be `[name rows cols]`"));
            };
            let rows: usize = rows.parse().map_err(|_| parse_err(no, "bad row count"))?;
            let cols: usize = cols.parse().map_err(|_| parse_err(no, "bad column count"))?;
            let mut m = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                let (row_no, row) = lines
                    .next()
                    .ok_or_else(|| parse_err(no, format!("block `{name}` ends after {i} of {rows} rows")))?;
                let vals: Vec<&str> = row.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(parse_err(row_no, format!("expected {cols} values, found {}", vals.len())));
                }
                for (j, v) in vals.iter().enumerate() {
                    m[(i, j)] = parse_f64(v, row_no)?;
                }
            }
            if blocks.insert(name.to_string(), (m, no)).is_some() {
                return Err(parse_err(no, format!("duplicate block `{name}`")));
            }
            continue;
        }
        if !blocks.is_empty() {
            return Err(parse_err(no, "key-value lines must precede matrix blocks"));
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(no, format!("expected `key = value`, got `{line}`")))?;
        if keys.insert(k.trim().to_string(), (v.trim().to_string(), no)).is_some() {
            return Err(parse_err(no, format!("duplicate key `{}`", k.trim())));
        }
    }

    let get = |k: &str| keys.get(k).ok_or_else(|| Error::Config(format!("model file is missing `{k}`")));
    let (format, no) = get("format")?;
    if format != FORMAT {
        return Err(parse_err(*no, format!("unsupported format `{format}`")));
    }
    let (version, no) = get("version")?;
    if version != VERSION {
        return Err(parse_err(*no, format!("unsupported version `{version}`")));
    }
    let family: KernelFamily = get("family")?.0.parse()?;
    let (gamma, no) = get("gamma")?;
    let scalar = GaussianKernel::new(parse_f64(gamma, *no)?)?;
    let (ridge, no) = get("ridge")?;
    let ridge = parse_f64(ridge, *no)?;
    let (count, no) = get("count")?;
    let count: usize = count
        .parse()
        .ok()
        .filter(|&c| c >= 1)
        .ok_or_else(|| parse_err(*no, "count must be a positive integer"))?;

    let structure = match blocks.remove("structure") {
        Some((m, _)) => Some(StructureMatrix::new(m)?),
        None => None,
    };
    let kernel = OperatorKernel::new(family, scalar, structure)?;
    let mut models = Vec::with_capacity(count);
    for idx in 1..=count {
        let mut take = |name: String| {
            blocks
                .remove(&name)
                .map(|(m, _)| m)
                .ok_or_else(|| Error::Config(format!("model file is missing block `{name}`")))
        };
        let anchors = take(format!("anchors.{idx}"))?;
        let coeffs = take(format!("coeffs.{idx}"))?;
        if anchors.shape() != coeffs.shape() {
            return Err(Error::Config(format!("anchors.{idx} and coeffs.{idx} differ in shape")));
        }
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.transpose()).collect::<Vec<_>>();
        models.push(OdeModel::new(kernel.clone(), rows(&anchors), rows(&coeffs), ridge)?);
    }
    if let Some((name, (_, no))) = blocks.into_iter().next() {
        return Err(parse_err(no, format!("unexpected block `{name}`")));
    }
    match keys.get("sim_weight") {
        Some((w, no)) => Ok(SavedModel::Multi(MultiModel::new(models, parse_f64(w, *no)?)?)),
        None if count == 1 => Ok(SavedModel::Single(models.pop().expect("one model"))),
        None => Err(Error::Config("multi-model file needs `sim_weight`".into())),
    }
}
