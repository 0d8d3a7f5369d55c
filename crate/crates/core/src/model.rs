//! Multi-task models: EMGPR (two-step learning), ICM and independent GPs.
//!
//! Targets are an `N x D` matrix; non-finite entries mark task values that were
//! not observed at that input. Every task must share the same input matrix.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_task, predict_task, FittedTaskGP, LatentProcessParams, OptConfig, NOISE_FLOOR};
use crate::kernels::{gram, gram_grad_lengthscale, gram_self, GramMatrix, KernelKind, KernelSpec};
use crate::optimizer::{maximize, OptimizeProblem};
use crate::structured::{block_inner_many, cross_cov_observed, observed_indices, stack_observed, StructuredCovariance, WeightSet};

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskPrediction {
    /// `M x D` predictive means.
    pub mean: DMatrix<f64>,
    /// `M x D` marginal predictive variances.
    pub variance: DMatrix<f64>,
}

pub trait MultiTaskRegressor: Send + Sync {
    fn task_count(&self) -> usize;
    fn predict(&self, xstar: &DMatrix<f64>) -> Result<MultiTaskPrediction>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    NoTransfer,
    Emgpr,
    Icm { rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub kernel: KernelKind,
    pub init_lengthscale: f64,
    pub init_noise_variance: f64,
    pub opt: OptConfig,
    /// Vectors per weight term in step 2.
    pub rank: usize,
    pub skip_step2: bool,
    /// Scheduling only; results do not depend on it, so reports leave it out.
    #[serde(skip_serializing)]
    pub parallelism: Parallelism,
    /// Add `σ_d²` to predictive variances.
    pub observation_noise: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            kernel: KernelKind::Se,
            init_lengthscale: 1.0,
            init_noise_variance: 0.02,
            opt: OptConfig::default(),
            rank: 1,
            skip_step2: false,
            parallelism: Parallelism::Parallel,
            observation_noise: false,
        }
    }
}

impl FitConfig {
    /// Step-1 starting point for inputs with `p` columns.
    pub fn initial_params(&self, p: usize) -> Result<LatentProcessParams> {
        LatentProcessParams::new(
            KernelSpec::uniform(self.kernel, p, self.init_lengthscale)?,
            self.init_noise_variance.sqrt(),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FitTimings {
    pub step1: Duration,
    pub step2: Duration,
}

fn check_xy(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::dims("target rows vs input rows", x.nrows(), y.nrows()));
    }
    if y.ncols() == 0 {
        return Err(Error::InvalidParameter("need at least one task".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("inputs must be finite".into()));
    }
    Ok(())
}

fn task_rows(x: &DMatrix<f64>, y: &DMatrix<f64>, d: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows: Vec<usize> = (0..y.nrows()).filter(|&i| y[(i, d)].is_finite()).collect();
    let xs = x.select_rows(rows.iter());
    let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[(i, d)]));
    (xs, ys)
}

/// Fits every task independently on its observed rows (step 1).
pub fn fit_step1_models(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    inits: &[LatentProcessParams],
    opt: &OptConfig,
    parallelism: Parallelism,
) -> Result<Vec<FittedTaskGP>> {
    check_xy(x, y)?;
    if inits.len() != y.ncols() {
        return Err(Error::dims("step-1 initial parameter sets", y.ncols(), inits.len()));
    }
    let one = |d: usize| -> Result<FittedTaskGP> {
        let (xs, ys) = task_rows(x, y, d);
        fit_task(&xs, &ys, &inits[d], opt).map_err(|e| e.in_task(d))
    };
    let results: Vec<Result<FittedTaskGP>> = match parallelism {
        Parallelism::Sequential => (0..y.ncols()).map(one).collect(),
        Parallelism::Parallel => (0..y.ncols()).into_par_iter().map(one).collect(),
    };
    let mut fits = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => {
                log::error!("step 1: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(fits),
    }
}

/// Step 1: per-task `(α_d, σ_d)`.
pub fn fit_step1(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    inits: &[LatentProcessParams],
    opt: &OptConfig,
    parallelism: Parallelism,
) -> Result<Vec<LatentProcessParams>> {
    Ok(fit_step1_models(x, y, inits, opt, parallelism)?
        .into_iter()
        .map(|f| f.params)
        .collect())
}

fn latent_grams(kernels: &[KernelSpec], x: &DMatrix<f64>) -> Result<Vec<GramMatrix>> {
    kernels.iter().map(|k| gram_self(k, x)).collect()
}

/// Step 2: maximizes the joint log marginal likelihood over the weights with
/// the step-1 parameters frozen. Starts from delta weights when `init` is `None`.
pub fn fit_step2(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    step1: &[LatentProcessParams],
    init: Option<&WeightSet>,
    opt: &OptConfig,
) -> Result<WeightSet> {
    check_xy(x, y)?;
    let d = y.ncols();
    if step1.len() != d {
        return Err(Error::dims("step-1 parameter sets", d, step1.len()));
    }
    let start = match init {
        Some(w) if w.task_count() != d || w.term_count() != d => {
            return Err(Error::dims("initial weight tasks", d, w.task_count()));
        }
        Some(w) => w.clone(),
        None => WeightSet::delta(d),
    };
    let kernels: Vec<KernelSpec> = step1.iter().map(|p| p.kernel.clone()).collect();
    let noise: Vec<f64> = step1.iter().map(|p| p.noise_variance()).collect();
    let grams = latent_grams(&kernels, x)?;
    let observed = observed_indices(y);
    let y_obs = stack_observed(y, &observed);

    let objective = |flat: &[f64]| {
        let w = start.with_flat(flat).ok()?;
        let cov = StructuredCovariance::assemble_observed(w, &grams, &noise, observed.clone())
            .ok()?
            .with_jitter(opt.jitter);
        let g = cov.joint_gradient(&y_obs).ok()?;
        Some((g.value, g.weights))
    };
    let problem = OptimizeProblem::new(objective, start.to_flat()).settings(opt.settings);
    let result = maximize(problem)?;
    log::debug!(
        "step 2: {} iterations, {:?}, joint log-ML {:.6}",
        result.iterations,
        result.termination,
        result.value
    );
    start.with_flat(&result.x)
}

/// A multi-task GP conditioned on training data, with cached `K_y⁻¹y`.
#[derive(Debug)]
pub struct EmgprModel {
    kind: ModelKind,
    latent: Vec<KernelSpec>,
    noise_std: Vec<f64>,
    weights: WeightSet,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    cov: StructuredCovariance,
    y_obs: DVector<f64>,
    gamma: DVector<f64>,
    log_marginal: f64,
    observation_noise: bool,
    timings: FitTimings,
}

impl EmgprModel {
    /// Conditions on `(x, y)` with fixed latent kernels, noise levels and weights.
    pub fn condition(
        kind: ModelKind,
        latent: Vec<KernelSpec>,
        noise_std: Vec<f64>,
        weights: WeightSet,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        check_xy(&x, &y)?;
        if weights.task_count() != y.ncols() {
            return Err(Error::dims("weight tasks vs target columns", y.ncols(), weights.task_count()));
        }
        if latent.len() != weights.term_count() {
            return Err(Error::dims("latent kernels vs weight terms", weights.term_count(), latent.len()));
        }
        if noise_std.len() != y.ncols() {
            return Err(Error::dims("noise levels vs tasks", y.ncols(), noise_std.len()));
        }
        let grams = latent_grams(&latent, &x)?;
        let noise: Vec<f64> = noise_std.iter().map(|s| s * s).collect();
        let observed = observed_indices(&y);
        if observed.is_empty() {
            return Err(Error::InvalidParameter("no observed targets".into()));
        }
        let y_obs = stack_observed(&y, &observed);
        let cov = StructuredCovariance::assemble_observed(weights.clone(), &grams, &noise, observed)?.with_jitter(jitter);
        let gamma = cov.solve(&y_obs)?;
        let log_marginal = cov.log_marginal_joint(&y_obs)?;
        Ok(EmgprModel {
            kind,
            latent,
            noise_std,
            weights,
            x,
            y,
            cov,
            y_obs,
            gamma,
            log_marginal,
            observation_noise: false,
            timings: FitTimings::default(),
        })
    }

    /// EMGPR conditioned with per-task step-1 parameters (one latent process per task).
    pub fn from_step1(
        kind: ModelKind,
        step1: &[LatentProcessParams],
        weights: WeightSet,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        jitter: f64,
    ) -> Result<Self> {
        Self::condition(
            kind,
            step1.iter().map(|p| p.kernel.clone()).collect(),
            step1.iter().map(|p| p.noise_std).collect(),
            weights,
            x,
            y,
            jitter,
        )
    }

    pub fn with_observation_noise(mut self, on: bool) -> Self {
        self.observation_noise = on;
        self
    }

    pub fn with_timings(mut self, timings: FitTimings) -> Self {
        self.timings = timings;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn latent_kernels(&self) -> &[KernelSpec] {
        &self.latent
    }

    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    /// Per-task `(kernel, σ_d)`; with a single shared latent process every task reports it.
    pub fn task_params(&self) -> Vec<LatentProcessParams> {
        let shared = self.latent.len() != self.noise_std.len();
        self.noise_std
            .iter()
            .enumerate()
            .map(|(d, &s)| LatentProcessParams {
                kernel: self.latent[if shared { 0 } else { d }].clone(),
                noise_std: s,
            })
            .collect()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn covariance(&self) -> &StructuredCovariance {
        &self.cov
    }

    /// Stacked observed targets, task-major.
    pub fn stacked_targets(&self) -> &DVector<f64> {
        &self.y_obs
    }

    /// `K_y⁻¹y` over the observed entries.
    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn timings(&self) -> FitTimings {
        self.timings
    }

    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<MultiTaskPrediction> {
        if xstar.ncols() != self.x.ncols() {
            return Err(Error::dims("test input columns", self.x.ncols(), xstar.ncols()));
        }
        let m = xstar.nrows();
        let d = self.weights.task_count();
        let cross_grams = self
            .latent
            .iter()
            .map(|k| gram(k, xstar, &self.x).map(|g| g.values))
            .collect::<Result<Vec<_>>>()?;
        let cross = cross_cov_observed(&self.weights, &cross_grams, self.cov.observed())?;
        let mean = &cross * &self.gamma;
        let v = self.cov.factor()?.solve_lower_mat(&cross.transpose());
        // unit-amplitude kernels: prior variance of task d is Σ_q [B_q]_dd
        let mut prior = vec![0.0; d];
        for q in 0..self.weights.term_count() {
            for w in self.weights.vectors(q) {
                for (p, wd) in prior.iter_mut().zip(w.iter()) {
                    *p += wd * wd;
                }
            }
        }
        let mut variance = DMatrix::zeros(m, d);
        for t in 0..d {
            let extra = if self.observation_noise { self.noise_std[t].powi(2) } else { 0.0 };
            for i in 0..m {
                let r = t * m + i;
                variance[(i, t)] = crate::gp::clamp_variance(prior[t] - v.column(r).norm_squared()) + extra;
            }
        }
        Ok(MultiTaskPrediction {
            mean: DMatrix::from_column_slice(m, d, mean.as_slice()),
            variance,
        })
    }
}

impl MultiTaskRegressor for EmgprModel {
    fn task_count(&self) -> usize {
        self.weights.task_count()
    }

    fn predict(&self, xstar: &DMatrix<f64>) -> Result<MultiTaskPrediction> {
        EmgprModel::predict(self, xstar)
    }
}

/// Two-step EMGPR fit from explicit step-1 starting points.
pub fn fit_with_inits(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    inits: &[LatentProcessParams],
    config: &FitConfig,
) -> Result<EmgprModel> {
    let t0 = Instant::now();
    let step1 = fit_step1(x, y, inits, &config.opt, config.parallelism)?;
    let step1_time = t0.elapsed();
    fit_from_step1(x, y, &step1, config, step1_time)
}

/// Runs step 2 (unless skipped) on top of given step-1 parameters.
pub fn fit_from_step1(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    step1: &[LatentProcessParams],
    config: &FitConfig,
    step1_time: Duration,
) -> Result<EmgprModel> {
    let d = y.ncols();
    let t1 = Instant::now();
    let (kind, weights) = if config.skip_step2 {
        (ModelKind::NoTransfer, WeightSet::delta(d))
    } else {
        let init = WeightSet::delta_with_rank(d, config.rank.max(1));
        (ModelKind::Emgpr, fit_step2(x, y, step1, Some(&init), &config.opt)?)
    };
    let step2_time = t1.elapsed();
    Ok(EmgprModel::from_step1(kind, step1, weights, x.clone(), y.clone(), config.opt.jitter)?
        .with_observation_noise(config.observation_noise)
        .with_timings(FitTimings {
            step1: step1_time,
            step2: step2_time,
        }))
}

/// Two-step EMGPR fit starting every task at the configured initial parameters.
pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &FitConfig) -> Result<EmgprModel> {
    let init = config.initial_params(x.ncols())?;
    fit_with_inits(x, y, &vec![init; y.ncols()], config)
}

/// Starting ICM mixing matrix: unit entries on a cyclic diagonal, 0.1 elsewhere.
pub fn icm_initial_weights(tasks: usize, rank: usize) -> DMatrix<f64> {
    DMatrix::from_fn(tasks, rank, |d, j| if d % rank == j { 1.0 } else { 0.1 })
}

/// ICM: one shared kernel, `B = W Wᵀ` of rank `rank`, per-task noise; all learned jointly.
pub fn fit_icm(x: &DMatrix<f64>, y: &DMatrix<f64>, rank: usize, config: &FitConfig) -> Result<EmgprModel> {
    let init = config.initial_params(x.ncols())?;
    fit_icm_from(x, y, rank, &init, config)
}

/// ICM fit starting from the kernel and noise level in `init`.
pub fn fit_icm_from(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    rank: usize,
    init: &LatentProcessParams,
    config: &FitConfig,
) -> Result<EmgprModel> {
    check_xy(x, y)?;
    let d = y.ncols();
    if rank == 0 || rank > d {
        return Err(Error::InvalidParameter(format!("ICM rank must be in 1..={d}, got {rank}")));
    }
    let t0 = Instant::now();
    let param = config.opt.parameterization;
    let n_kernel = init.kernel.n_params();
    let n_weights = d * rank;
    let w0 = WeightSet::single_term(&icm_initial_weights(d, rank))?;
    let observed = observed_indices(y);
    let y_obs = stack_observed(y, &observed);

    // free vector: [kernel length-scales | W entries | noise std per task]
    let mut positive0 = init.kernel.lengthscales().to_vec();
    positive0.extend(std::iter::repeat_n(init.noise_std, d));
    let split = |free: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut pos = free[..n_kernel].to_vec();
        pos.extend_from_slice(&free[n_kernel + n_weights..]);
        (param.decode(&pos), free[n_kernel..n_kernel + n_weights].to_vec())
    };
    let mut start = param.encode(&positive0[..n_kernel]);
    start.extend(w0.to_flat());
    start.extend(param.encode(&positive0[n_kernel..]));
    let (lower_p, upper_p) = param.bounds(n_kernel + d);
    let mut lower = lower_p[..n_kernel].to_vec();
    let mut upper = upper_p[..n_kernel].to_vec();
    lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, n_weights));
    upper.extend(std::iter::repeat_n(f64::INFINITY, n_weights));
    lower.extend_from_slice(&lower_p[n_kernel..]);
    upper.extend_from_slice(&upper_p[n_kernel..]);

    let objective = |free: &[f64]| {
        let (positive, wflat) = split(free);
        let kernel = init.kernel.with_lengthscales(positive[..n_kernel].to_vec()).ok()?;
        let noise: Vec<f64> = positive[n_kernel..].iter().map(|s| s * s).collect();
        let w = w0.with_flat(&wflat).ok()?;
        let b = w.coregionalization(0);
        let k = gram_self(&kernel, x).ok()?;
        let dks = (0..n_kernel)
            .map(|p| gram_grad_lengthscale(&kernel, x, p))
            .collect::<Result<Vec<_>>>()
            .ok()?;
        let cov = StructuredCovariance::assemble_observed(w, &[k], &noise, observed.clone())
            .ok()?
            .with_jitter(config.opt.jitter);
        let g = cov.joint_gradient(&y_obs).ok()?;
        let dk_refs: Vec<&DMatrix<f64>> = dks.iter().collect();
        let inner = block_inner_many(&g.residual, &dk_refs, cov.observed(), x.nrows(), d);
        let mut pos_grad: Vec<f64> = inner.iter().map(|c| 0.5 * b.component_mul(c).sum()).collect();
        pos_grad.extend_from_slice(&g.noise_std);
        let mut pos_all = positive[..n_kernel].to_vec();
        pos_all.extend_from_slice(&positive[n_kernel..]);
        param.chain(&pos_all, &mut pos_grad);
        let mut grad = pos_grad[..n_kernel].to_vec();
        grad.extend(g.weights);
        grad.extend_from_slice(&pos_grad[n_kernel..]);
        Some((g.value, grad))
    };
    let problem = OptimizeProblem::new(objective, start)
        .bounds(lower, upper)
        .settings(config.opt.settings);
    let result = maximize(problem)?;
    log::debug!(
        "icm: {} iterations, {:?}, joint log-ML {:.6}",
        result.iterations,
        result.termination,
        result.value
    );
    let (positive, wflat) = split(&result.x);
    let kernel = init.kernel.with_lengthscales(positive[..n_kernel].to_vec())?;
    let noise_std: Vec<f64> = positive[n_kernel..].iter().map(|s| s.max(NOISE_FLOOR)).collect();
    let weights = w0.with_flat(&wflat)?;
    let elapsed = t0.elapsed();
    Ok(EmgprModel::condition(
        ModelKind::Icm { rank },
        vec![kernel],
        noise_std,
        weights,
        x.clone(),
        y.clone(),
        config.opt.jitter,
    )?
    .with_observation_noise(config.observation_noise)
    .with_timings(FitTimings {
        step1: Duration::ZERO,
        step2: elapsed,
    }))
}

/// The no-transfer baseline as `D` separate single-task GPs.
///
/// Equivalent to an [`EmgprModel`] with delta weights, without forming the
/// `ND x ND` covariance.
#[derive(Debug)]
pub struct IndependentGps {
    tasks: Vec<FittedTaskGP>,
    observation_noise: bool,
    fit_time: Duration,
}

impl IndependentGps {
    pub fn new(tasks: Vec<FittedTaskGP>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidParameter("need at least one task".into()));
        }
        Ok(IndependentGps {
            tasks,
            observation_noise: false,
            fit_time: Duration::ZERO,
        })
    }

    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &FitConfig) -> Result<Self> {
        let init = config.initial_params(x.ncols())?;
        Self::fit_with_inits(x, y, &vec![init; y.ncols()], config)
    }

    pub fn fit_with_inits(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        inits: &[LatentProcessParams],
        config: &FitConfig,
    ) -> Result<Self> {
        let t0 = Instant::now();
        let tasks = fit_step1_models(x, y, inits, &config.opt, config.parallelism)?;
        let fit_time = t0.elapsed();
        Ok(IndependentGps {
            tasks,
            observation_noise: config.observation_noise,
            fit_time,
        })
    }

    pub fn tasks(&self) -> &[FittedTaskGP] {
        &self.tasks
    }

    pub fn params(&self) -> Vec<LatentProcessParams> {
        self.tasks.iter().map(|t| t.params.clone()).collect()
    }

    pub fn fit_time(&self) -> Duration {
        self.fit_time
    }
}

impl MultiTaskRegressor for IndependentGps {
    fn task_count(&self) -> usize {
        self.tasks.len()
    }

    fn predict(&self, xstar: &DMatrix<f64>) -> Result<MultiTaskPrediction> {
        let m = xstar.nrows();
        let d = self.tasks.len();
        let mut mean = DMatrix::zeros(m, d);
        let mut variance = DMatrix::zeros(m, d);
        for (t, gp) in self.tasks.iter().enumerate() {
            let (mu, var) = predict_task(gp, xstar).map_err(|e| e.in_task(t))?;
            mean.set_column(t, &mu);
            let extra = if self.observation_noise { gp.params.noise_variance() } else { 0.0 };
            variance.set_column(t, &var.add_scalar(extra));
        }
        Ok(MultiTaskPrediction { mean, variance })
    }
}
