mod common;

use common::*;
use emgpr_core::kernels::GramMatrix;
use emgpr_core::structured::{cross_cov, StructuredCovariance, WeightSet};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

fn gm(values: DMatrix<f64>) -> GramMatrix {
    GramMatrix { values, symmetric: true }
}

struct Instance {
    weights: WeightSet,
    ks: Vec<DMatrix<f64>>,
    noise: Vec<f64>,
    y: DVector<f64>,
}

fn instance(seed: u64, n: usize, d: usize, p: usize) -> Instance {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, n, p, 0.0, 2.0);
    let ks: Vec<DMatrix<f64>> = (0..d)
        .map(|_| {
            let a = r.random_range(0.4..1.5);
            se_gram(&x, &x, &[a])
        })
        .collect();
    let flat: Vec<f64> = (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let weights = WeightSet::delta(d).with_flat(&flat).unwrap();
    let noise: Vec<f64> = (0..d).map(|_| r.random_range(0.05..0.5)).collect();
    let y = DVector::from_fn(n * d, |_, _| r.random_range(-1.5..1.5));
    Instance { weights, ks, noise, y }
}

fn bs(w: &WeightSet) -> Vec<DMatrix<f64>> {
    (0..w.term_count()).map(|q| w.coregionalization(q)).collect()
}

fn assemble(inst: &Instance) -> StructuredCovariance {
    let grams: Vec<GramMatrix> = inst.ks.iter().cloned().map(gm).collect();
    StructuredCovariance::assemble(inst.weights.clone(), &grams, &inst.noise).unwrap()
}

#[test]
fn assembly_matches_naive_kronecker() {
    for seed in 0..20 {
        let inst = instance(seed, 2, 2, 1);
        let cov = assemble(&inst);
        let oracle = dense_joint(&bs(&inst.weights), &inst.ks, &inst.noise);
        assert!((cov.matrix() - &oracle).amax() <= 1e-12, "seed {seed}");
        assert!((cov.matrix() - cov.matrix().transpose()).amax() <= 1e-12);
    }
}

#[test]
fn singular_vector_weights_reproduce_b_kron_k() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let d = 3;
        let b = random_psd(&mut r, d);
        let x = random_matrix(&mut r, 4, 2, 0.0, 2.0);
        let k = se_gram(&x, &x, &[0.8]);
        let eig = SymmetricEigen::new(b.clone());
        let terms = (0..d)
            .map(|q| vec![eig.eigenvectors.column(q) * eig.eigenvalues[q].max(0.0).sqrt()])
            .collect();
        let weights = WeightSet::new(terms).unwrap();
        let noise = vec![0.1, 0.2, 0.3];
        let grams = vec![gm(k.clone()); d];
        let cov = StructuredCovariance::assemble(weights, &grams, &noise).unwrap();
        let oracle = kron(&b, &k) + kron(&DMatrix::from_diagonal(&DVector::from_vec(noise)), &DMatrix::identity(4, 4));
        assert!((cov.matrix() - oracle).amax() <= 1e-10);
    }
}

#[test]
fn log_marginal_matches_dense_oracle() {
    for seed in 0..20 {
        let inst = instance(200 + seed, 3, 2, 2);
        let cov = assemble(&inst);
        let oracle = dense_log_density(&dense_joint(&bs(&inst.weights), &inst.ks, &inst.noise), &inst.y);
        assert!((cov.log_marginal_joint(&inst.y).unwrap() - oracle).abs() <= 1e-10);
    }
}

#[test]
fn zero_targets_leave_only_the_determinant() {
    let inst = instance(7, 3, 2, 1);
    let cov = assemble(&inst);
    let y = DVector::zeros(6);
    let det = cov.matrix().clone().lu().determinant();
    let expect = -0.5 * det.ln() - 3.0 * (2.0 * std::f64::consts::PI).ln();
    assert!((cov.log_marginal_joint(&y).unwrap() - expect).abs() <= 1e-12);
}

#[test]
fn delta_weights_split_into_task_likelihoods() {
    let mut inst = instance(9, 5, 3, 2);
    inst.weights = WeightSet::delta(3);
    let cov = assemble(&inst);
    let total: f64 = (0..3)
        .map(|d| {
            let mut k = inst.ks[d].clone();
            k += DMatrix::identity(5, 5) * inst.noise[d];
            dense_log_density(&k, &inst.y.rows(d * 5, 5).into_owned())
        })
        .sum();
    assert!((cov.log_marginal_joint(&inst.y).unwrap() - total).abs() <= 1e-9);
}

fn joint_value(inst: &Instance, flat: &[f64]) -> f64 {
    let w = inst.weights.with_flat(flat).unwrap();
    let grams: Vec<GramMatrix> = inst.ks.iter().cloned().map(gm).collect();
    StructuredCovariance::assemble(w, &grams, &inst.noise)
        .unwrap()
        .log_marginal_joint(&inst.y)
        .unwrap()
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..30 {
        let inst = instance(300 + seed, 4, 3, 2);
        let g = assemble(&inst).weight_grad(&inst.y).unwrap();
        let fd = central_diff(|w| joint_value(&inst, w), &inst.weights.to_flat(), 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b, 1e-2));
        }
    }
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}

#[test]
fn determinant_gradient_in_identity_limit() {
    // tiny length-scale on spread-out points: every K_d is the identity to machine precision
    let x = DMatrix::from_fn(4, 1, |i, _| 10.0 * i as f64);
    let k = se_gram(&x, &x, &[1e-3]);
    assert_eq!(k, DMatrix::identity(4, 4));
    let mut r = rng(11);
    let flat: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
    let inst = Instance {
        weights: WeightSet::delta(3).with_flat(&flat).unwrap(),
        ks: vec![k; 3],
        noise: vec![1e-3; 3],
        y: DVector::zeros(12),
    };
    let g = assemble(&inst).weight_grad(&inst.y).unwrap();
    let fd = central_diff(|w| joint_value(&inst, w), &flat, 1e-6);
    for (a, b) in g.iter().zip(&fd) {
        assert!(rel_err(*a, *b, 1e-2) <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn cross_cov_cases() {
    let mut r = rng(21);
    let x = random_matrix(&mut r, 3, 2, 0.0, 2.0);
    let xs = random_matrix(&mut r, 2, 2, 0.0, 2.0);
    let alphas = [0.5, 1.1];
    let cross: Vec<DMatrix<f64>> = alphas.iter().map(|a| se_gram(&xs, &x, &[*a])).collect();

    let delta = cross_cov(&WeightSet::delta(2), &cross).unwrap();
    let blockdiag = kron(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), &cross[0])
        + kron(&DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]), &cross[1]);
    assert_eq!(delta, blockdiag);

    let w = WeightSet::delta(2).with_flat(&[0.7, -0.2, 0.4, 1.3]).unwrap();
    let got = cross_cov(&w, &cross).unwrap();
    let oracle = kron(&w.coregionalization(0), &cross[0]) + kron(&w.coregionalization(1), &cross[1]);
    assert!((got - oracle).amax() <= 1e-12);

    let own: Vec<DMatrix<f64>> = alphas.iter().map(|a| se_gram(&x, &x, &[*a])).collect();
    let noise = [0.3, 0.1];
    let grams: Vec<GramMatrix> = own.iter().cloned().map(gm).collect();
    let cov = StructuredCovariance::assemble(w.clone(), &grams, &noise).unwrap();
    let mut no_noise = cov.matrix().clone();
    for i in 0..6 {
        no_noise[(i, i)] -= noise[i / 3];
    }
    assert!((cross_cov(&w, &own).unwrap() - no_noise).amax() <= 1e-15);
    assert!(cross_cov(&w, &cross[..1]).is_err());
}

#[test]
fn icm_and_emgpr_represent_each_other() {
    let mut r = rng(31);
    let w = random_matrix(&mut r, 3, 3, -1.0, 1.0);
    let x = random_matrix(&mut r, 4, 1, 0.0, 2.0);
    let k = se_gram(&x, &x, &[0.6]);
    let noise = [0.1, 0.2, 0.3];
    let icm = StructuredCovariance::assemble(WeightSet::single_term(&w).unwrap(), &[gm(k.clone())], &noise).unwrap();
    let per_column = WeightSet::new((0..3).map(|q| vec![w.column(q).into_owned()]).collect()).unwrap();
    let emgpr = StructuredCovariance::assemble(per_column, &vec![gm(k); 3], &noise).unwrap();
    assert!((icm.matrix() - emgpr.matrix()).amax() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_structure_symmetry_and_psd(seed in 0u64..10_000, n in 1usize..5, d in 1usize..4) {
        let inst = instance(seed, n, d, 2);
        let cov = assemble(&inst);
        let m = cov.matrix();
        let b = bs(&inst.weights);
        for a in 0..d {
            for c in 0..d {
                let block = m.view((a * n, c * n), (n, n));
                let mut expect = DMatrix::zeros(n, n);
                for (k, bq) in inst.ks.iter().zip(&b) {
                    expect += k * bq[(a, c)];
                }
                if a == c {
                    expect += DMatrix::identity(n, n) * inst.noise[a];
                }
                prop_assert!((block - expect).amax() <= 1e-12);
            }
        }
        prop_assert!((m - m.transpose()).amax() <= 1e-12);
        let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
        prop_assert!(min_eig >= -1e-8);
    }
}
