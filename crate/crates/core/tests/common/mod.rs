//! Reference computations that share no code with the library.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// `exp(-Σ_p (x_p - x'_p)² / (2 α_p²))` entry by entry.
pub fn se_gram(x: &DMatrix<f64>, x2: &DMatrix<f64>, alphas: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        let mut s = 0.0;
        for p in 0..x.ncols() {
            let a = if alphas.len() == 1 { alphas[0] } else { alphas[p] };
            s += (x[(i, p)] - x2[(j, p)]).powi(2) / (2.0 * a * a);
        }
        (-s).exp()
    })
}

/// `Σ_q B_q ⊗ K_q + diag(σ²) ⊗ I`.
pub fn dense_joint(bs: &[DMatrix<f64>], ks: &[DMatrix<f64>], noise: &[f64]) -> DMatrix<f64> {
    let n = ks[0].nrows();
    let mut k = kron(&DMatrix::from_diagonal(&DVector::from_column_slice(noise)), &DMatrix::identity(n, n));
    for (b, kq) in bs.iter().zip(ks) {
        k += kron(b, kq);
    }
    k
}

/// Gaussian log density via LU inverse and determinant.
pub fn dense_log_density(k: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let inv = k.clone().try_inverse().expect("singular oracle matrix");
    let det = k.clone().lu().determinant();
    -0.5 * y.dot(&(&inv * y)) - 0.5 * det.ln() - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Predictive mean and marginal variance from dense blocks.
pub fn dense_predict(k: &DMatrix<f64>, cross: &DMatrix<f64>, prior_diag: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let inv = k.clone().try_inverse().expect("singular oracle matrix");
    let mean = cross * &inv * y;
    let reduction = cross * &inv * cross.transpose();
    let var = DVector::from_fn(prior_diag.len(), |i, _| prior_diag[i] - reduction[(i, i)]);
    (mean, var)
}

pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

pub fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, d, d, -1.0, 1.0);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.05
}
