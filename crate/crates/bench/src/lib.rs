//! Shared fixtures for the benchmarks.

use emgpr_core::kernels::{gram_self, GramMatrix};
use emgpr_core::{DMatrix, DVector, KernelSpec, WeightSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random joint-model inputs: `n` points in 2-D, `d` tasks with one SE latent
/// process each, dense random weights.
pub struct Fixture {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub grams: Vec<GramMatrix>,
    pub weights: WeightSet,
    pub noise: Vec<f64>,
}

impl Fixture {
    pub fn new(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0..5.0));
        let y = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let grams = (0..d)
            .map(|_| gram_self(&KernelSpec::se(rng.random_range(0.5..1.5)).unwrap(), &x).unwrap())
            .collect();
        let flat: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let weights = WeightSet::delta(d).with_flat(&flat).unwrap();
        let noise = vec![0.05; d];
        Fixture { x, y, grams, weights, noise }
    }

    /// Targets stacked task-major.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_column_slice(self.y.as_slice())
    }
}
