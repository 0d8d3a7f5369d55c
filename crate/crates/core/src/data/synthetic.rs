use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{gram_self, KernelSpec};
use crate::linalg::SpdFactor;

/// How latent processes combine into tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Row `d` holds task `d`'s loading on each latent process.
    Weights(Vec<Vec<f64>>),
    /// One PSD `D x D` matrix per latent process, row-major.
    Coregionalization(Vec<Vec<Vec<f64>>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub tasks: usize,
    pub inputs: usize,
    /// SE length-scale of each latent process.
    pub alphas: Vec<f64>,
    pub mixing: Mixing,
    pub noise_std: f64,
    /// Inputs are uniform on `[0, input_scale]^P`.
    #[serde(default = "one")]
    pub input_scale: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Noise-free task values.
    pub latent: DMatrix<f64>,
    /// Per latent process, a `D x R_q` factor with `B_q = A_q A_qᵀ`.
    pub loadings: Vec<DMatrix<f64>>,
}

fn loadings(config: &SyntheticConfig) -> Result<Vec<DMatrix<f64>>> {
    let d = config.tasks;
    let q = config.alphas.len();
    match &config.mixing {
        Mixing::Weights(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != q) {
                return Err(Error::config("mixing", format!("weights must be {d} rows of {q}")));
            }
            Ok((0..q).map(|j| DMatrix::from_fn(d, 1, |t, _| rows[t][j])).collect())
        }
        Mixing::Coregionalization(bs) => {
            if bs.len() != q {
                return Err(Error::config("mixing", format!("need {q} coregionalization matrices")));
            }
            bs.iter()
                .map(|b| {
                    if b.len() != d || b.iter().any(|r| r.len() != d) {
                        return Err(Error::config("mixing", format!("coregionalization matrices must be {d}x{d}")));
                    }
                    let m = DMatrix::from_fn(d, d, |i, j| b[i][j]);
                    if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                        return Err(Error::config("mixing", "coregionalization matrix is not symmetric"));
                    }
                    let eig = SymmetricEigen::new(m.clone());
                    let tol = 1e-10 * m.amax().max(1.0);
                    if eig.eigenvalues.iter().any(|&l| l < -tol) {
                        return Err(Error::config("mixing", "coregionalization matrix is not PSD"));
                    }
                    let scale = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                    Ok(eig.eigenvectors * DMatrix::from_diagonal(&scale))
                })
                .collect()
        }
    }
}

/// Samples inputs, latent GP draws and noisy task values.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    if config.n < 2 || config.tasks == 0 || config.inputs == 0 {
        return Err(Error::config("n", "need n >= 2, tasks >= 1, inputs >= 1"));
    }
    if config.alphas.is_empty() {
        return Err(Error::config("alphas", "need at least one latent process"));
    }
    if !(config.noise_std >= 0.0 && config.noise_std.is_finite()) {
        return Err(Error::config("noise_std", "must be finite and non-negative"));
    }
    if !(config.input_scale > 0.0 && config.input_scale.is_finite()) {
        return Err(Error::config("input_scale", "must be positive"));
    }
    let loads = loadings(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, d) = (config.n, config.tasks);
    let x = DMatrix::from_fn(n, config.inputs, |_, _| rng.random_range(0.0..config.input_scale));
    let mut latent = DMatrix::zeros(n, d);
    for (alpha, a) in config.alphas.iter().zip(&loads) {
        let kernel = KernelSpec::se(*alpha).map_err(|e| Error::config("alphas", e.to_string()))?;
        let k = gram_self(&kernel, &x)?.values;
        let l = SpdFactor::new(&k, 1e-8)?.lower();
        let z = DMatrix::from_fn(n, a.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        latent += l * z * a.transpose();
    }
    let noise = DMatrix::from_fn(n, d, |_, _| config.noise_std * rng.sample::<f64, _>(StandardNormal));
    let dataset = Dataset::new(
        x,
        &latent + noise,
        (0..d).map(|t| format!("y{t}")).collect(),
        (0..config.inputs).map(|p| format!("x{p}")).collect(),
    )?;
    Ok(SyntheticData {
        dataset,
        latent,
        loadings: loads,
    })
}
