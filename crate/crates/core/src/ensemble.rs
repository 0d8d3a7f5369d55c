//! Strided mini-batches and an ensemble of step-2 weight sets.
//!
//! With `L = floor(N / N0)`, batch `k` (0-based) holds indices `k, L + k,
//! 2L + k, ...` up to `N0` entries. The `N - N0·L` trailing indices are
//! leftovers.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::LatentProcessParams;
use crate::model::{fit_step1, fit_step2, EmgprModel, FitConfig, FitTimings, ModelKind, MultiTaskPrediction, MultiTaskRegressor, Parallelism};
use crate::structured::WeightSet;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n: usize,
    pub batch_size: usize,
    /// 0-based indices of each batch.
    pub batches: Vec<Vec<usize>>,
    pub leftovers: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeftoverPolicy {
    /// Leftover `i` joins batch `i mod L`.
    #[default]
    Distribute,
    /// Leftovers are not used for step 2.
    Drop,
}

pub fn partition(n: usize, batch_size: usize) -> Result<PartitionPlan> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidParameter(format!(
            "mini-batch size must be in 1..={n}, got {batch_size}"
        )));
    }
    let l = n / batch_size;
    let batches = (0..l).map(|k| (0..batch_size).map(|t| t * l + k).collect()).collect();
    Ok(PartitionPlan {
        n,
        batch_size,
        batches,
        leftovers: (batch_size * l..n).collect(),
    })
}

impl PartitionPlan {
    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    /// Training subsets after applying the leftover policy, each sorted.
    pub fn subsets(&self, policy: LeftoverPolicy) -> Vec<Vec<usize>> {
        let mut out = self.batches.clone();
        if policy == LeftoverPolicy::Distribute {
            let l = out.len();
            for &i in &self.leftovers {
                out[i % l].push(i);
            }
        }
        for s in &mut out {
            s.sort_unstable();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Mini-batch size `N0`; `D²` when unset.
    pub batch_size: Option<usize>,
    pub leftover: LeftoverPolicy,
    pub fit: FitConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            batch_size: None,
            leftover: LeftoverPolicy::Distribute,
            fit: FitConfig::default(),
        }
    }
}

impl EnsembleConfig {
    /// `N0` for `n` samples and `d` tasks, capped at `n`.
    pub fn resolve_batch_size(&self, n: usize, d: usize) -> usize {
        self.batch_size.unwrap_or(d * d).min(n)
    }
}

#[derive(Debug)]
pub struct EnsembleModel {
    step1: Vec<LatentProcessParams>,
    members: Vec<EmgprModel>,
    subsets: Vec<Vec<usize>>,
    timings: FitTimings,
}

impl EnsembleModel {
    pub fn step1(&self) -> &[LatentProcessParams] {
        &self.step1
    }

    pub fn members(&self) -> &[EmgprModel] {
        &self.members
    }

    pub fn member_weights(&self) -> Vec<&WeightSet> {
        self.members.iter().map(|m| m.weights()).collect()
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// Step-1 time and wall-clock for the whole member phase.
    pub fn timings(&self) -> FitTimings {
        self.timings
    }
}

/// Fits step 1 on all data, then one step-2 weight set per mini-batch.
pub fn fit_ensemble(x: &DMatrix<f64>, y: &DMatrix<f64>, config: &EnsembleConfig) -> Result<EnsembleModel> {
    let init = config.fit.initial_params(x.ncols())?;
    fit_ensemble_with_inits(x, y, &vec![init; y.ncols()], config)
}

pub fn fit_ensemble_with_inits(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    inits: &[LatentProcessParams],
    config: &EnsembleConfig,
) -> Result<EnsembleModel> {
    let t0 = Instant::now();
    let step1 = fit_step1(x, y, inits, &config.fit.opt, config.fit.parallelism)?;
    let step1_time = t0.elapsed();
    fit_ensemble_from_step1(x, y, step1, config, step1_time)
}

/// Member phase only, reusing step-1 parameters fitted on the full data.
pub fn fit_ensemble_from_step1(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    step1: Vec<LatentProcessParams>,
    config: &EnsembleConfig,
    step1_time: Duration,
) -> Result<EnsembleModel> {
    if x.nrows() != y.nrows() {
        return Err(Error::dims("target rows vs input rows", x.nrows(), y.nrows()));
    }
    let n0 = config.batch_size.unwrap_or(y.ncols() * y.ncols());
    let plan = partition(x.nrows(), n0)?;
    let subsets = plan.subsets(config.leftover);
    let fit = &config.fit;
    let t1 = Instant::now();
    let member = |k: usize| -> Result<EmgprModel> {
        let xs = x.select_rows(subsets[k].iter());
        let ys = y.select_rows(subsets[k].iter());
        let init = WeightSet::delta_with_rank(y.ncols(), fit.rank.max(1));
        let w = fit_step2(&xs, &ys, &step1, Some(&init), &fit.opt).map_err(|e| e.in_member(k))?;
        EmgprModel::from_step1(ModelKind::Emgpr, &step1, w, xs, ys, fit.opt.jitter)
            .map(|m| m.with_observation_noise(fit.observation_noise))
            .map_err(|e| e.in_member(k))
    };
    let results: Vec<Result<EmgprModel>> = match fit.parallelism {
        Parallelism::Sequential => (0..subsets.len()).map(member).collect(),
        Parallelism::Parallel => (0..subsets.len()).into_par_iter().map(member).collect(),
    };
    let members = results.into_iter().collect::<Result<Vec<_>>>()?;
    let step2_time = t1.elapsed();
    log::debug!("ensemble: {} members of size ~{n0}", members.len());
    Ok(EnsembleModel {
        step1,
        members,
        subsets,
        timings: FitTimings {
            step1: step1_time,
            step2: step2_time,
        },
    })
}

/// Elementwise mean of member predictive means and variances.
pub fn predict_ensemble(model: &EnsembleModel, xstar: &DMatrix<f64>) -> Result<MultiTaskPrediction> {
    let preds = model
        .members
        .iter()
        .enumerate()
        .map(|(k, m)| m.predict(xstar).map_err(|e| e.in_member(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_predictions(&preds))
}

/// Elementwise mean of predictions with equal shapes. Panics on an empty slice.
pub fn average_predictions(preds: &[MultiTaskPrediction]) -> MultiTaskPrediction {
    let scale = 1.0 / preds.len() as f64;
    let mut mean = preds[0].mean.clone();
    let mut variance = preds[0].variance.clone();
    for p in &preds[1..] {
        mean += &p.mean;
        variance += &p.variance;
    }
    if preds.len() > 1 {
        mean *= scale;
        variance *= scale;
    }
    MultiTaskPrediction { mean, variance }
}

impl MultiTaskRegressor for EnsembleModel {
    fn task_count(&self) -> usize {
        self.step1.len()
    }

    fn predict(&self, xstar: &DMatrix<f64>) -> Result<MultiTaskPrediction> {
        predict_ensemble(self, xstar)
    }
}
