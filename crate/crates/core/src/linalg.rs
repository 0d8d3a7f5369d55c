//! Dense symmetric positive-definite factorization.
//!
//! Matrices are stored as `nalgebra` types throughout the crate; the Cholesky
//! factor and the solves behind it run on `faer`, whose blocked kernels are an
//! order of magnitude faster at the sizes the joint covariance reaches.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default diagonal jitter used when a factorization fails on the first try.
pub const DEFAULT_JITTER: f64 = 1e-10;

const JITTER_ATTEMPTS: usize = 4;

fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn to_nalgebra(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Cholesky factor `L Lᵀ = A (+ jitter I)`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    llt: faer::linalg::solvers::Llt<f64>,
    jitter: f64,
}

impl SpdFactor {
    /// Factorizes `a`. If the plain factorization fails, retries with a
    /// diagonal jitter of `base_jitter`, growing by 100x per attempt.
    pub fn new(a: &DMatrix<f64>, base_jitter: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::dims("square matrix", a.nrows(), a.ncols()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(
                "matrix has non-finite entries".into(),
            ));
        }
        if let Ok(llt) = view(a).llt(Side::Lower) {
            return Ok(SpdFactor { llt, jitter: 0.0 });
        }
        let mut jitter = base_jitter;
        for _ in 0..JITTER_ATTEMPTS {
            if jitter > 0.0 {
                let mut shifted = a.clone();
                for i in 0..a.nrows() {
                    shifted[(i, i)] += jitter;
                }
                if let Ok(llt) = view(&shifted).llt(Side::Lower) {
                    return Ok(SpdFactor { llt, jitter });
                }
            }
            jitter *= 100.0;
        }
        Err(Error::NumericalFailure(format!(
            "Cholesky factorization of {}x{} matrix failed (max jitter {:e})",
            a.nrows(),
            a.ncols(),
            jitter / 100.0
        )))
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    /// Jitter that was actually added to the diagonal (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> DMatrix<f64> {
        to_nalgebra(self.llt.L())
    }

    /// `log |A| = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve_in_place(rhs.as_mut());
        DVector::from_fn(b.len(), |i, _| rhs[(i, 0)])
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = view(b).to_owned();
        self.llt.solve_in_place(rhs.as_mut());
        to_nalgebra(rhs.as_ref())
    }

    /// Solves `L v = b` for every column of `b`.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = view(b).to_owned();
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(
            self.llt.L(),
            rhs.as_mut(),
            faer::Par::Seq,
        );
        to_nalgebra(rhs.as_ref())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.llt.inverse();
        // the factor-based inverse is symmetric up to rounding; enforce it
        let n = inv.nrows();
        DMatrix::from_fn(n, n, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)]))
    }
}
