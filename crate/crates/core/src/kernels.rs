//! Squared-exponential kernels with unit amplitude.
//!
//! `k(x, x') = exp(-Σ_i (x_i - x'_i)² / (2 α_i²))`, where the SE kind shares a
//! single length-scale across all input dimensions and the ARD kind carries
//! one per dimension. Inputs are stored row-wise (`N x P`).

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Se,
    Ard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    kind: KernelKind,
    lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn se(lengthscale: f64) -> Result<Self> {
        Self::new(KernelKind::Se, vec![lengthscale])
    }

    pub fn ard(lengthscales: Vec<f64>) -> Result<Self> {
        Self::new(KernelKind::Ard, lengthscales)
    }

    pub fn new(kind: KernelKind, lengthscales: Vec<f64>) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidParameter("kernel needs a length-scale".into()));
        }
        if kind == KernelKind::Se && lengthscales.len() != 1 {
            return Err(Error::dims("SE length-scales", 1, lengthscales.len()));
        }
        if let Some(bad) = lengthscales.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "length-scale must be positive and finite, got {bad}"
            )));
        }
        Ok(KernelSpec { kind, lengthscales })
    }

    /// A spec of `kind` for `p` input dimensions with every length-scale set to `value`.
    pub fn uniform(kind: KernelKind, p: usize, value: f64) -> Result<Self> {
        match kind {
            KernelKind::Se => Self::se(value),
            KernelKind::Ard => Self::ard(vec![value; p]),
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn n_params(&self) -> usize {
        self.lengthscales.len()
    }

    /// Replaces the length-scales, keeping the kind.
    pub fn with_lengthscales(&self, lengthscales: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, lengthscales)
    }

    fn check_input_dim(&self, p: usize) -> Result<()> {
        if self.kind == KernelKind::Ard && self.lengthscales.len() != p {
            return Err(Error::dims("ARD length-scales vs input dim", p, self.lengthscales.len()));
        }
        Ok(())
    }

    #[inline]
    fn scaled_sq_dist(&self, x: &[f64], x2: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Se => {
                let a = self.lengthscales[0];
                let r2: f64 = x.iter().zip(x2).map(|(u, v)| (u - v) * (u - v)).sum();
                r2 / (a * a)
            }
            KernelKind::Ard => x
                .iter()
                .zip(x2)
                .zip(&self.lengthscales)
                .map(|((u, v), a)| (u - v) * (u - v) / (a * a))
                .sum(),
        }
    }
}

/// Kernel matrix between two input sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub symmetric: bool,
}

impl GramMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::dims("kernel input length", x.len(), x2.len()));
    }
    spec.check_input_dim(x.len())?;
    Ok((-0.5 * spec.scaled_sq_dist(x, x2)).exp())
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Gram matrix `K[i, j] = k(x_i, x2_j)`. When both sets are the same data the
/// result is filled on one triangle and mirrored, so it is exactly symmetric.
pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<GramMatrix> {
    if x.ncols() != x2.ncols() {
        return Err(Error::dims("gram input columns", x.ncols(), x2.ncols()));
    }
    spec.check_input_dim(x.ncols())?;
    let a = rows(x);
    let symmetric = std::ptr::eq(x, x2) || x == x2;
    if symmetric {
        let n = a.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = 1.0;
            for j in 0..i {
                let v = (-0.5 * spec.scaled_sq_dist(&a[i], &a[j])).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        return Ok(GramMatrix { values: k, symmetric });
    }
    let b = rows(x2);
    let k = DMatrix::from_fn(a.len(), b.len(), |i, j| {
        (-0.5 * spec.scaled_sq_dist(&a[i], &b[j])).exp()
    });
    Ok(GramMatrix { values: k, symmetric })
}

/// Symmetric Gram matrix of one input set.
pub fn gram_self(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<GramMatrix> {
    gram(spec, x, x)
}

/// `∂K/∂α_dim` for the symmetric Gram matrix of `x`.
///
/// Entry `(i, j)` is `k(x_i, x_j) (x_{i,dim} - x_{j,dim})² / α_dim³`; for the
/// SE kind `dim` must be 0 and the squared distance runs over all dimensions.
pub fn gram_grad_lengthscale(spec: &KernelSpec, x: &DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    spec.check_input_dim(x.ncols())?;
    if dim >= spec.n_params() {
        return Err(Error::InvalidParameter(format!(
            "length-scale index {dim} out of range for {} parameter(s)",
            spec.n_params()
        )));
    }
    let a = rows(x);
    let n = a.len();
    let alpha = spec.lengthscales[dim];
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let k = (-0.5 * spec.scaled_sq_dist(&a[i], &a[j])).exp();
            let d2 = match spec.kind {
                KernelKind::Se => a[i].iter().zip(&a[j]).map(|(u, v)| (u - v) * (u - v)).sum(),
                KernelKind::Ard => (a[i][dim] - a[j][dim]).powi(2),
            };
            let v = k * d2 / (alpha * alpha * alpha);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Single input row as a `1 x P` matrix, handy for point queries.
pub fn point(x: &[f64]) -> DMatrix<f64> {
    let row = RowDVector::from_row_slice(x);
    DMatrix::from_rows(&[row])
}
