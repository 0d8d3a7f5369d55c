//! The multi-task covariance `Σ_q B_q ⊗ K_q + diag(σ²) ⊗ I`.
//!
//! Each coregionalization matrix is held in factored form
//! `B_q = Σ_j w_q^j (w_q^j)ᵀ`. Vectors are task-major: entry `(d, i)` of the
//! stacked vector sits at `d * N + i`. A covariance may be restricted to a
//! subset of the `N·D` entries, which is how unobserved task values are
//! handled.
//!
//! Everything is dense. Gradients never materialize `∂K_y/∂θ`; they reduce
//! `γγᵀ - K_y⁻¹` to a `D x D` matrix of block inner products per term.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::gaussian_log_density;
use crate::kernels::GramMatrix;
use crate::linalg::{SpdFactor, DEFAULT_JITTER};

/// Low-rank factors of the coregionalization matrices, `terms[q][j]` being
/// `w_q^j` (length `D`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    tasks: usize,
    terms: Vec<Vec<DVector<f64>>>,
}

impl WeightSet {
    pub fn new(terms: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        let first = terms
            .first()
            .and_then(|t| t.first())
            .ok_or_else(|| Error::InvalidParameter("weight set needs at least one vector".into()))?;
        let tasks = first.len();
        let rank = terms[0].len();
        if tasks == 0 {
            return Err(Error::InvalidParameter("weight vectors must be non-empty".into()));
        }
        for term in &terms {
            if term.len() != rank {
                return Err(Error::dims("weight vectors per term", rank, term.len()));
            }
            for w in term {
                if w.len() != tasks {
                    return Err(Error::dims("weight vector length", tasks, w.len()));
                }
            }
        }
        Ok(WeightSet { tasks, terms })
    }

    /// `w_d = δ_d` for every task: the no-transfer covariance.
    pub fn delta(tasks: usize) -> Self {
        Self::delta_with_rank(tasks, 1)
    }

    /// Delta vectors in the first slot of each term, zeros in the remaining `rank - 1`.
    pub fn delta_with_rank(tasks: usize, rank: usize) -> Self {
        let terms = (0..tasks)
            .map(|q| {
                (0..rank.max(1))
                    .map(|j| {
                        let mut w = DVector::zeros(tasks);
                        if j == 0 {
                            w[q] = 1.0;
                        }
                        w
                    })
                    .collect()
            })
            .collect();
        WeightSet { tasks, terms }
    }

    /// Single term whose vectors are the columns of `w` (`D x R`), i.e. `B = W Wᵀ`.
    pub fn single_term(w: &DMatrix<f64>) -> Result<Self> {
        Self::new(vec![w.column_iter().map(|c| c.into_owned()).collect()])
    }

    pub fn task_count(&self) -> usize {
        self.tasks
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn rank(&self) -> usize {
        self.terms[0].len()
    }

    pub fn vectors(&self, term: usize) -> &[DVector<f64>] {
        &self.terms[term]
    }

    /// `B_q = Σ_j w_q^j (w_q^j)ᵀ`.
    pub fn coregionalization(&self, term: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.tasks, self.tasks);
        for w in &self.terms[term] {
            b += w * w.transpose();
        }
        b
    }

    pub fn n_params(&self) -> usize {
        self.terms.len() * self.rank() * self.tasks
    }

    /// Entries flattened in (term, vector, task) order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.terms.iter().flatten().flat_map(|w| w.iter().copied()).collect()
    }

    /// Inverse of [`WeightSet::to_flat`] with this set's shape.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::dims("flat weight vector", self.n_params(), flat.len()));
        }
        let mut it = flat.chunks(self.tasks);
        let terms = self
            .terms
            .iter()
            .map(|t| t.iter().map(|_| DVector::from_column_slice(it.next().unwrap())).collect())
            .collect();
        Ok(WeightSet { tasks: self.tasks, terms })
    }

    /// Reorders tasks: task `d` of the result is task `perm[d]` of `self`.
    /// Latent terms are reordered the same way when there is one per task.
    pub fn permute_tasks(&self, perm: &[usize]) -> Self {
        let permute_vec = |w: &DVector<f64>| DVector::from_fn(self.tasks, |d, _| w[perm[d]]);
        let terms: Vec<Vec<DVector<f64>>> = if self.terms.len() == self.tasks {
            perm.iter().map(|&q| self.terms[q].iter().map(permute_vec).collect()).collect()
        } else {
            self.terms.iter().map(|t| t.iter().map(permute_vec).collect()).collect()
        };
        WeightSet { tasks: self.tasks, terms }
    }
}

/// Task-major indices `d * n + i` of the finite entries of an `N x D` matrix.
pub fn observed_indices(y: &DMatrix<f64>) -> Vec<usize> {
    let n = y.nrows();
    let mut idx = Vec::new();
    for d in 0..y.ncols() {
        for i in 0..n {
            if y[(i, d)].is_finite() {
                idx.push(d * n + i);
            }
        }
    }
    idx
}

/// Stacks the observed entries of `y` in task-major order.
pub fn stack_observed(y: &DMatrix<f64>, observed: &[usize]) -> DVector<f64> {
    let n = y.nrows();
    DVector::from_iterator(observed.len(), observed.iter().map(|&k| y[(k % n, k / n)]))
}

#[derive(Debug)]
pub struct StructuredCovariance {
    weights: WeightSet,
    grams: Vec<DMatrix<f64>>,
    noise: Vec<f64>,
    n: usize,
    observed: Vec<usize>,
    matrix: DMatrix<f64>,
    jitter: f64,
    factor: OnceLock<std::result::Result<SpdFactor, String>>,
}

/// Log marginal likelihood together with the pieces its gradients need.
pub struct JointGradient {
    pub value: f64,
    /// `∂/∂w` in [`WeightSet::to_flat`] order.
    pub weights: Vec<f64>,
    /// `∂/∂σ_d` for each task's noise standard deviation.
    pub noise_std: Vec<f64>,
    /// `γγᵀ - K_y⁻¹` over the observed entries.
    pub residual: DMatrix<f64>,
}

impl StructuredCovariance {
    /// Full covariance over all `N·D` entries.
    pub fn assemble(weights: WeightSet, grams: &[GramMatrix], noise_variances: &[f64]) -> Result<Self> {
        let n = grams.first().map(|g| g.nrows()).unwrap_or(0);
        let all: Vec<usize> = (0..n * weights.task_count()).collect();
        Self::assemble_observed(weights, grams, noise_variances, all)
    }

    /// Covariance restricted to the task-major entries listed in `observed`
    /// (strictly increasing).
    pub fn assemble_observed(
        weights: WeightSet,
        grams: &[GramMatrix],
        noise_variances: &[f64],
        observed: Vec<usize>,
    ) -> Result<Self> {
        let d = weights.task_count();
        if grams.len() != weights.term_count() {
            return Err(Error::dims("gram matrices vs weight terms", weights.term_count(), grams.len()));
        }
        if noise_variances.len() != d {
            return Err(Error::dims("noise variances vs tasks", d, noise_variances.len()));
        }
        if let Some(bad) = noise_variances.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidParameter(format!("noise variance must be positive, got {bad}")));
        }
        let n = grams[0].nrows();
        for g in grams {
            if g.nrows() != n || g.ncols() != n {
                return Err(Error::dims("gram matrix size", n, g.nrows().max(g.ncols())));
            }
        }
        if observed.windows(2).any(|w| w[0] >= w[1]) || observed.last().is_some_and(|&k| k >= n * d) {
            return Err(Error::InvalidParameter("observed indices must be increasing and in range".into()));
        }
        let bs: Vec<DMatrix<f64>> = (0..weights.term_count()).map(|q| weights.coregionalization(q)).collect();
        let grams: Vec<DMatrix<f64>> = grams.iter().map(|g| g.values.clone()).collect();
        let m = observed.len();
        let mut matrix = DMatrix::zeros(m, m);
        for c in 0..m {
            let (b, j) = (observed[c] / n, observed[c] % n);
            for r in c..m {
                let (a, i) = (observed[r] / n, observed[r] % n);
                let mut v: f64 = bs.iter().zip(&grams).map(|(bq, kq)| bq[(a, b)] * kq[(i, j)]).sum();
                if r == c {
                    v += noise_variances[a];
                }
                matrix[(r, c)] = v;
                matrix[(c, r)] = v;
            }
        }
        Ok(StructuredCovariance {
            weights,
            grams,
            noise: noise_variances.to_vec(),
            n,
            observed,
            matrix,
            jitter: DEFAULT_JITTER,
            factor: OnceLock::new(),
        })
    }

    /// Base jitter for the lazy factorization; must be called before the first solve.
    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self.factor = OnceLock::new();
        self
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn noise_variances(&self) -> &[f64] {
        &self.noise
    }

    pub fn points(&self) -> usize {
        self.n
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn factor(&self) -> Result<&SpdFactor> {
        self.factor
            .get_or_init(|| SpdFactor::new(&self.matrix, self.jitter).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::NumericalFailure(e.clone()))
    }

    fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.observed.len() {
            return Err(Error::dims("stacked targets", self.observed.len(), y.len()));
        }
        Ok(())
    }

    pub fn solve(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_y(y)?;
        Ok(self.factor()?.solve_vec(y))
    }

    /// `-½ yᵀK_y⁻¹y - ½ log|K_y| - (n/2) log 2π` for the stacked observed targets.
    pub fn log_marginal_joint(&self, y: &DVector<f64>) -> Result<f64> {
        let gamma = self.solve(y)?;
        Ok(gaussian_log_density(self.factor()?, y, &gamma))
    }

    /// `C[a, b] = Σ_ij A[(a,i),(b,j)] K[i, j]` for a matrix `A` over the observed entries.
    pub fn block_inner(&self, a: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
        block_inner_many(a, &[k], &self.observed, self.n, self.weights.task_count()).remove(0)
    }

    /// Joint log marginal likelihood with its weight and noise gradients.
    pub fn joint_gradient(&self, y: &DVector<f64>) -> Result<JointGradient> {
        self.check_y(y)?;
        let factor = self.factor()?;
        let gamma = factor.solve_vec(y);
        let value = gaussian_log_density(factor, y, &gamma);
        let mut residual = factor.inverse();
        residual.neg_mut();
        residual.ger(1.0, &gamma, &gamma, 1.0);

        let d = self.weights.task_count();
        let kernels: Vec<&DMatrix<f64>> = self.grams.iter().collect();
        let inner = block_inner_many(&residual, &kernels, &self.observed, self.n, d);
        // ∂/∂(w_q^j)_l = (C_q w_q^j)_l
        let mut weights = Vec::with_capacity(self.weights.n_params());
        for (q, c) in inner.iter().enumerate() {
            for w in self.weights.vectors(q) {
                weights.extend((c * w).iter().copied());
            }
        }
        // ∂K_y/∂σ_d = 2σ_d (E_dd ⊗ I)
        let mut noise_std = vec![0.0; d];
        for (r, &k) in self.observed.iter().enumerate() {
            noise_std[k / self.n] += residual[(r, r)];
        }
        for (g, s2) in noise_std.iter_mut().zip(&self.noise) {
            *g *= s2.sqrt();
        }
        Ok(JointGradient {
            value,
            weights,
            noise_std,
            residual,
        })
    }

    /// Gradient of [`StructuredCovariance::log_marginal_joint`] w.r.t. every weight entry.
    pub fn weight_grad(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        Ok(self.joint_gradient(y)?.weights)
    }
}

pub(crate) fn block_inner_many(
    a: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
    observed: &[usize],
    n: usize,
    d: usize,
) -> Vec<DMatrix<f64>> {
    // observed is increasing, so each task owns a contiguous run of rows
    let point: Vec<usize> = observed.iter().map(|&k| k % n).collect();
    let mut runs = vec![0usize; d + 1];
    for &k in observed {
        runs[k / n + 1] += 1;
    }
    for t in 0..d {
        runs[t + 1] += runs[t];
    }
    kernels
        .iter()
        .map(|k| {
            let mut out = DMatrix::zeros(d, d);
            for tb in 0..d {
                for c in runs[tb]..runs[tb + 1] {
                    let acol = a.column(c);
                    let kcol = k.column(point[c]);
                    for ta in 0..d {
                        let mut acc = 0.0;
                        for r in runs[ta]..runs[ta + 1] {
                            acc += acol[r] * kcol[point[r]];
                        }
                        out[(ta, tb)] += acc;
                    }
                }
            }
            out
        })
        .collect()
}

/// Cross-covariance between test and training latent values: block `(d, d')`
/// is `Σ_q [B_q]_{d,d'} K_q(X*, X)`, without noise. Rows are task-major over
/// the `M` test points, columns task-major over the `N` training points.
pub fn cross_cov(weights: &WeightSet, grams_cross: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let n = grams_cross.first().map(|g| g.ncols()).unwrap_or(0);
    let all: Vec<usize> = (0..n * weights.task_count()).collect();
    cross_cov_observed(weights, grams_cross, &all)
}

/// The columns of [`cross_cov`] listed in `observed`.
pub fn cross_cov_observed(weights: &WeightSet, grams_cross: &[DMatrix<f64>], observed: &[usize]) -> Result<DMatrix<f64>> {
    if grams_cross.len() != weights.term_count() {
        return Err(Error::dims("cross grams vs weight terms", weights.term_count(), grams_cross.len()));
    }
    let (m, n) = grams_cross[0].shape();
    for g in grams_cross {
        if g.shape() != (m, n) {
            return Err(Error::dims("cross gram shape", m * n, g.nrows() * g.ncols()));
        }
    }
    let d = weights.task_count();
    if observed.iter().any(|&k| k >= n * d) {
        return Err(Error::InvalidParameter("observed index out of range".into()));
    }
    let bs: Vec<DMatrix<f64>> = (0..weights.term_count()).map(|q| weights.coregionalization(q)).collect();
    let mut out = DMatrix::zeros(m * d, observed.len());
    for (c, &k) in observed.iter().enumerate() {
        let (b, j) = (k / n, k % n);
        let mut col = out.column_mut(c);
        for (bq, kq) in bs.iter().zip(grams_cross) {
            let kcol = kq.column(j);
            for a in 0..d {
                let w = bq[(a, b)];
                if w != 0.0 {
                    col.rows_mut(a * m, m).axpy(w, &kcol, 1.0);
                }
            }
        }
    }
    Ok(out)
}
