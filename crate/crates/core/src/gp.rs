//! Exact single-task GP regression with a unit-amplitude SE/ARD kernel.
//!
//! This is step one of the two-step learner and, run once per task, the
//! no-transfer baseline.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram, gram_grad_lengthscale, gram_self, KernelSpec};
use crate::linalg::{SpdFactor, DEFAULT_JITTER};
use crate::optimizer::{maximize, OptimizeProblem, OptimizerSettings};

/// Smallest noise standard deviation a fit may return.
pub const NOISE_FLOOR: f64 = 1e-6;
/// Lower bound on positive hyperparameters when optimizing in raw space.
pub const RAW_LOWER_BOUND: f64 = 1e-6;

static CLAMPED_VARIANCES: AtomicUsize = AtomicUsize::new(0);

/// Number of negative predictive variances that were clamped to zero so far.
pub fn clamped_variance_count() -> usize {
    CLAMPED_VARIANCES.load(Ordering::Relaxed)
}

pub(crate) fn clamp_variance(v: f64) -> f64 {
    if v < 0.0 {
        if v < -1e-10 {
            CLAMPED_VARIANCES.fetch_add(1, Ordering::Relaxed);
            log::warn!("clamping negative predictive variance {v:e}");
        }
        0.0
    } else {
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentProcessParams {
    pub kernel: KernelSpec,
    pub noise_std: f64,
}

impl LatentProcessParams {
    pub fn new(kernel: KernelSpec, noise_std: f64) -> Result<Self> {
        if !(noise_std.is_finite() && noise_std > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise std must be positive, got {noise_std}"
            )));
        }
        Ok(LatentProcessParams { kernel, noise_std })
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    /// Positive parameters in optimizer order: length-scales then noise std.
    pub fn to_positive_vec(&self) -> Vec<f64> {
        let mut v = self.kernel.lengthscales().to_vec();
        v.push(self.noise_std);
        v
    }

    pub fn from_positive_vec(&self, v: &[f64]) -> Result<Self> {
        let p = self.kernel.n_params();
        Self::new(self.kernel.with_lengthscales(v[..p].to_vec())?, v[p])
    }
}

/// How positive hyperparameters are exposed to the optimizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Optimize `log θ`, unbounded.
    #[default]
    Log,
    /// Optimize `θ` directly with a lower bound of [`RAW_LOWER_BOUND`].
    Raw,
}

impl Parameterization {
    pub fn encode(self, positive: &[f64]) -> Vec<f64> {
        match self {
            Parameterization::Log => positive.iter().map(|v| v.ln()).collect(),
            Parameterization::Raw => positive.to_vec(),
        }
    }

    pub fn decode(self, free: &[f64]) -> Vec<f64> {
        match self {
            Parameterization::Log => free.iter().map(|v| v.exp()).collect(),
            Parameterization::Raw => free.to_vec(),
        }
    }

    /// Converts a gradient w.r.t. positive parameters into the free parameterization.
    pub fn chain(self, positive: &[f64], grad: &mut [f64]) {
        if self == Parameterization::Log {
            for (g, v) in grad.iter_mut().zip(positive) {
                *g *= v;
            }
        }
    }

    pub fn bounds(self, n: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            Parameterization::Log => (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n]),
            Parameterization::Raw => (vec![RAW_LOWER_BOUND; n], vec![f64::INFINITY; n]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub settings: OptimizerSettings,
    pub parameterization: Parameterization,
    pub jitter: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            settings: OptimizerSettings::default(),
            parameterization: Parameterization::Log,
            jitter: DEFAULT_JITTER,
        }
    }
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidParameter("need at least one training point".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::dims("targets vs inputs", x.nrows(), y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("targets must be finite".into()));
    }
    Ok(())
}

fn noisy_cov(params: &LatentProcessParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut k = gram_self(&params.kernel, x)?.values;
    let s2 = params.noise_variance();
    for i in 0..k.nrows() {
        k[(i, i)] += s2;
    }
    Ok(k)
}

/// `-½ yᵀK⁻¹y - ½ log|K| - (N/2) log 2π` from a factor of `K` and `γ = K⁻¹y`.
pub(crate) fn gaussian_log_density(factor: &SpdFactor, y: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
    -0.5 * y.dot(gamma) - 0.5 * factor.log_det() - 0.5 * y.len() as f64 * (2.0 * PI).ln()
}

/// Log marginal likelihood with `K = K_α + σ² I`.
pub fn log_marginal(params: &LatentProcessParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    log_marginal_with_jitter(params, x, y, DEFAULT_JITTER)
}

fn log_marginal_with_jitter(params: &LatentProcessParams, x: &DMatrix<f64>, y: &DVector<f64>, jitter: f64) -> Result<f64> {
    check_data(x, y)?;
    let factor = SpdFactor::new(&noisy_cov(params, x)?, jitter)?;
    let gamma = factor.solve_vec(y);
    Ok(gaussian_log_density(&factor, y, &gamma))
}

/// Value and gradient w.r.t. (length-scales..., σ) in the positive parameterization.
fn value_and_positive_grad(
    params: &LatentProcessParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    jitter: f64,
) -> Result<(f64, Vec<f64>)> {
    check_data(x, y)?;
    let factor = SpdFactor::new(&noisy_cov(params, x)?, jitter)?;
    let gamma = factor.solve_vec(y);
    let value = gaussian_log_density(&factor, y, &gamma);
    // ½ tr((γγᵀ - K⁻¹) ∂K/∂θ)
    let kinv = factor.inverse();
    let mut grad = Vec::with_capacity(params.kernel.n_params() + 1);
    for dim in 0..params.kernel.n_params() {
        let dk = gram_grad_lengthscale(&params.kernel, x, dim)?;
        let quad = gamma.dot(&(&dk * &gamma));
        let trace = kinv.component_mul(&dk).sum();
        grad.push(0.5 * (quad - trace));
    }
    // ∂K/∂σ = 2σ I
    let sigma = params.noise_std;
    grad.push(sigma * (gamma.dot(&gamma) - kinv.trace()));
    Ok((value, grad))
}

/// Gradient of [`log_marginal`] in the given parameterization, ordered as
/// (length-scales..., noise std).
pub fn log_marginal_grad(
    params: &LatentProcessParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    parameterization: Parameterization,
) -> Result<Vec<f64>> {
    let (_, mut grad) = value_and_positive_grad(params, x, y, DEFAULT_JITTER)?;
    parameterization.chain(&params.to_positive_vec(), &mut grad);
    Ok(grad)
}

/// A fitted single-task GP with its factorization cached for prediction.
#[derive(Clone, Debug)]
pub struct FittedTaskGP {
    pub params: LatentProcessParams,
    x: DMatrix<f64>,
    y: DVector<f64>,
    factor: SpdFactor,
    gamma: DVector<f64>,
    log_marginal: f64,
}

impl FittedTaskGP {
    /// Conditions a GP with fixed parameters on data.
    pub fn condition(params: LatentProcessParams, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        Self::condition_with_jitter(params, x, y, DEFAULT_JITTER)
    }

    fn condition_with_jitter(params: LatentProcessParams, x: DMatrix<f64>, y: DVector<f64>, jitter: f64) -> Result<Self> {
        check_data(&x, &y)?;
        let factor = SpdFactor::new(&noisy_cov(&params, &x)?, jitter)?;
        let gamma = factor.solve_vec(&y);
        let log_marginal = gaussian_log_density(&factor, &y, &gamma);
        Ok(FittedTaskGP {
            params,
            x,
            y,
            factor,
            gamma,
            log_marginal,
        })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    /// Lower Cholesky factor of `K + σ² I`.
    pub fn cholesky_lower(&self) -> DMatrix<f64> {
        self.factor.lower()
    }

    /// `γ = (K + σ² I)⁻¹ y`.
    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }
}

/// Maximizes the log marginal likelihood of one task starting from `init`.
pub fn fit_task(x: &DMatrix<f64>, y: &DVector<f64>, init: &LatentProcessParams, config: &OptConfig) -> Result<FittedTaskGP> {
    check_data(x, y)?;
    let mean = y.mean();
    if mean.abs() >= 0.1 {
        log::warn!("fit_task: targets look un-normalized (mean {mean:.3})");
    }
    let param = config.parameterization;
    let start = init.to_positive_vec();
    let n = start.len();
    let (lower, upper) = param.bounds(n);
    let objective = |free: &[f64]| {
        let positive = param.decode(free);
        let candidate = init.from_positive_vec(&positive).ok()?;
        let (v, mut g) = value_and_positive_grad(&candidate, x, y, config.jitter).ok()?;
        param.chain(&positive, &mut g);
        Some((v, g))
    };
    let problem = OptimizeProblem::new(objective, param.encode(&start))
        .bounds(lower, upper)
        .settings(config.settings);
    let result = maximize(problem)?;
    log::debug!(
        "fit_task: {} iterations, {:?}, log-ML {:.6}",
        result.iterations,
        result.termination,
        result.value
    );
    let mut positive = param.decode(&result.x);
    positive[n - 1] = positive[n - 1].max(NOISE_FLOOR);
    let params = init.from_positive_vec(&positive)?;
    FittedTaskGP::condition_with_jitter(params, x.clone(), y.clone(), config.jitter)
}

/// Latent-function predictive mean and variance at `xstar`.
pub fn predict_task(model: &FittedTaskGP, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if xstar.ncols() != model.x.ncols() {
        return Err(Error::dims("test input columns", model.x.ncols(), xstar.ncols()));
    }
    let kstar = gram(&model.params.kernel, xstar, &model.x)?.values; // M x N
    let mean = &kstar * &model.gamma;
    let v = model.factor.solve_lower_mat(&kstar.transpose()); // N x M
    let variance = DVector::from_fn(xstar.nrows(), |m, _| {
        clamp_variance(1.0 - v.column(m).norm_squared())
    });
    Ok((mean, variance))
}
