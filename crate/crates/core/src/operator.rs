//! Matrix-valued kernels on `R^p` and block Gram assembly.
//!
//! Three families are supported:
//!
//! * decomposable: `K(x, z) = k(x, z) C`
//! * transformable: `K(x, z)_ij = k(x_i, z_j)`, the scalar kernel applied to
//!   single coordinates
//! * Hadamard: the entrywise product of the two above
//!
//! A block Gram matrix over points `x_1..x_m` is the `mp x mp` matrix whose
//! `(l, s)` block is `K(x_l, x_s)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{GaussianKernel, ScalarKernel};

/// A symmetric positive semidefinite `p x p` output-structure matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix(DMatrix<f64>);

impl StructureMatrix {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if !c.is_square() || c.nrows() == 0 {
            return Err(Error::validation(format!(
                "structure matrix must be square and non-empty, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("structure matrix must be finite"));
        }
        let asym = (&c - c.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::validation(format!(
                "structure matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let min = c.clone().symmetric_eigenvalues().min();
        let scale = c.trace().abs().max(f64::MIN_POSITIVE);
        if min < -1e-10 * scale {
            return Err(Error::validation(format!(
                "structure matrix is not positive semidefinite (min eigenvalue {min:e})"
            )));
        }
        Ok(Self(c))
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    /// Wraps a matrix already known to be symmetric PSD.
    pub(crate) fn from_psd(c: DMatrix<f64>) -> Self {
        Self(c)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Decomposable,
    Transformable,
    Hadamard,
}

impl KernelFamily {
    pub fn needs_structure(self) -> bool {
        !matches!(self, KernelFamily::Transformable)
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Decomposable => "decomposable",
            KernelFamily::Transformable => "transformable",
            KernelFamily::Hadamard => "hadamard",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decomposable" => Ok(KernelFamily::Decomposable),
            "transformable" => Ok(KernelFamily::Transformable),
            "hadamard" => Ok(KernelFamily::Hadamard),
            other => Err(Error::Config(format!(
                "unknown kernel family `{other}` (expected decomposable, transformable or hadamard)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorKernel {
    family: KernelFamily,
    scalar: GaussianKernel,
    structure: Option<StructureMatrix>,
}

impl OperatorKernel {
    pub fn new(family: KernelFamily, scalar: GaussianKernel, structure: Option<StructureMatrix>) -> Result<Self> {
        match (family.needs_structure(), structure.is_some()) {
            (true, false) => Err(Error::Config(format!("the {family} kernel requires a structure matrix"))),
            (false, true) => Err(Error::Config("the transformable kernel takes no structure matrix".into())),
            _ => Ok(Self {
                family,
                scalar,
                structure,
            }),
        }
    }

    pub fn decomposable(scalar: GaussianKernel, structure: StructureMatrix) -> Self {
        Self {
            family: KernelFamily::Decomposable,
            scalar,
            structure: Some(structure),
        }
    }

    pub fn transformable(scalar: GaussianKernel) -> Self {
        Self {
            family: KernelFamily::Transformable,
            scalar,
            structure: None,
        }
    }

    pub fn hadamard(scalar: GaussianKernel, structure: StructureMatrix) -> Self {
        Self {
            family: KernelFamily::Hadamard,
            scalar,
            structure: Some(structure),
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn scalar(&self) -> &GaussianKernel {
        &self.scalar
    }

    pub fn structure(&self) -> Option<&StructureMatrix> {
        self.structure.as_ref()
    }

    /// Same family and bandwidth with a different structure matrix.
    pub fn with_structure(&self, structure: StructureMatrix) -> Result<Self> {
        Self::new(self.family, self.scalar, Some(structure))
    }

    /// `p x p` block `K(x, z)`.
    pub fn eval_block(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(x.len(), z.len())?;
        if let Some(c) = &self.structure {
            check_dim(c.dim(), x.len())?;
        }
        let p = x.len();
        let mut out = DMatrix::zeros(p, p);
        self.write_block(x.as_slice(), z.as_slice(), &mut out, 0, 0);
        Ok(out)
    }

    /// Writes `K(x, z)` into `out` at `(row, col)`; dimensions are trusted.
    pub(crate) fn write_block(&self, x: &[f64], z: &[f64], out: &mut DMatrix<f64>, row: usize, col: usize) {
        let p = x.len();
        match self.family {
            KernelFamily::Decomposable => {
                let k = self.scalar.eval_slices(x, z);
                let c = self.structure.as_ref().expect("validated at construction").matrix();
                for j in 0..p {
                    for i in 0..p {
                        out[(row + i, col + j)] = k * c[(i, j)];
                    }
                }
            }
            KernelFamily::Transformable => {
                for j in 0..p {
                    for i in 0..p {
                        out[(row + i, col + j)] = self.scalar.eval_scalar(x[i], z[j]);
                    }
                }
            }
            KernelFamily::Hadamard => {
                let k = self.scalar.eval_slices(x, z);
                let c = self.structure.as_ref().expect("validated at construction").matrix();
                for j in 0..p {
                    for i in 0..p {
                        out[(row + i, col + j)] = k * c[(i, j)] * self.scalar.eval_scalar(x[i], z[j]);
                    }
                }
            }
        }
    }

    /// `K(x, z) a` without materialising the block.
    pub(crate) fn apply_block(&self, x: &[f64], z: &[f64], a: &[f64], out: &mut [f64]) {
        let p = x.len();
        match self.family {
            KernelFamily::Decomposable => {
                let k = self.scalar.eval_slices(x, z);
                let c = self.structure.as_ref().expect("validated at construction").matrix();
                for i in 0..p {
                    let mut s = 0.0;
                    for j in 0..p {
                        s += c[(i, j)] * a[j];
                    }
                    out[i] += k * s;
                }
            }
            KernelFamily::Transformable => {
                for i in 0..p {
                    let mut s = 0.0;
                    for j in 0..p {
                        s += self.scalar.eval_scalar(x[i], z[j]) * a[j];
                    }
                    out[i] += s;
                }
            }
            KernelFamily::Hadamard => {
                let k = self.scalar.eval_slices(x, z);
                let c = self.structure.as_ref().expect("validated at construction").matrix();
                for i in 0..p {
                    let mut s = 0.0;
                    for j in 0..p {
                        s += c[(i, j)] * self.scalar.eval_scalar(x[i], z[j]) * a[j];
                    }
                    out[i] += k * s;
                }
            }
        }
    }

    fn check_points(&self, points: &[DVector<f64>]) -> Result<usize> {
        let p = match (points.first(), &self.structure) {
            (Some(v), _) => v.len(),
            (None, Some(c)) => c.dim(),
            (None, None) => 0,
        };
        for v in points {
            check_dim(p, v.len())?;
        }
        if let Some(c) = &self.structure {
            if !points.is_empty() {
                check_dim(c.dim(), p)?;
            }
        }
        Ok(p)
    }
}

/// The `mp x mp` block Gram matrix of `points`.
pub fn block_gram(kernel: &OperatorKernel, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::validation("block Gram matrix needs at least one point"));
    }
    let p = kernel.check_points(points)?;
    let m = points.len();
    let mut out = DMatrix::zeros(m * p, m * p);
    for l in 0..m {
        for s in l..m {
            kernel.write_block(points[l].as_slice(), points[s].as_slice(), &mut out, l * p, s * p);
            if s != l {
                for j in 0..p {
                    for i in 0..p {
                        out[(s * p + j, l * p + i)] = out[(l * p + i, s * p + j)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(m_a p) x (m_b p)` matrix with block `(l, s) = K(a_l, b_s)`.
pub fn cross_block_gram(kernel: &OperatorKernel, a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let pa = kernel.check_points(a)?;
    let pb = kernel.check_points(b)?;
    if !a.is_empty() && !b.is_empty() {
        check_dim(pa, pb)?;
    }
    let p = pa.max(pb);
    let mut out = DMatrix::zeros(a.len() * p, b.len() * p);
    for (l, x) in a.iter().enumerate() {
        for (s, z) in b.iter().enumerate() {
            kernel.write_block(x.as_slice(), z.as_slice(), &mut out, l * p, s * p);
        }
    }
    Ok(out)
}
