//! Experiment protocols, restarts and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate_original, fit_records, generate_synthetic, inverse_transform, load_jura, mean_sd, transform, Metrics, SyntheticConfig};
use crate::ensemble::{fit_ensemble_from_step1, EnsembleConfig, LeftoverPolicy};
use crate::error::{Error, Result};
use crate::gp::LatentProcessParams;
use crate::model::{fit_from_step1, fit_icm_from, FitConfig, IndependentGps, MultiTaskRegressor, Parallelism};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Gp,
    Icm,
    Emgpr,
    EmgprEnsemble,
}

impl std::fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelChoice::Gp => "gp",
            ModelChoice::Icm => "icm",
            ModelChoice::Emgpr => "emgpr",
            ModelChoice::EmgprEnsemble => "emgpr-ensemble",
        })
    }
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(ModelChoice::Gp),
            "icm" => Ok(ModelChoice::Icm),
            "emgpr" => Ok(ModelChoice::Emgpr),
            "emgpr-ensemble" => Ok(ModelChoice::EmgprEnsemble),
            other => Err(Error::config("model", format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    /// The first target is scored on the test sites, where the other targets
    /// are observed and used for training.
    JuraCd { data_dir: PathBuf },
    /// All targets are trained on the training sites and scored on the test sites.
    JuraAll { data_dir: PathBuf },
    /// The first `train` generated points train, the rest test.
    Synthetic { data: SyntheticConfig, train: usize },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::JuraCd {
            data_dir: PathBuf::from("data/jura"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub model: ModelChoice,
    pub targets: Vec<String>,
    pub log_transform: bool,
    pub restarts: usize,
    /// k-fold cross-validation over the pooled train and test points.
    pub folds: Option<usize>,
    pub seed: u64,
    /// Mini-batch size for the ensemble; `D²` when unset.
    pub batch_size: Option<usize>,
    /// ICM rank.
    pub rank: usize,
    pub leftover: LeftoverPolicy,
    /// Log-scale spread of the step-1 starting points for restarts after the first.
    pub restart_spread: f64,
    pub fit: FitConfig,
    /// Record wall-clock times in the report.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::default(),
            model: ModelChoice::Emgpr,
            targets: vec!["Cd".into(), "Ni".into(), "Zn".into()],
            log_transform: false,
            restarts: 10,
            folds: None,
            seed: 0,
            batch_size: None,
            rank: 1,
            leftover: LeftoverPolicy::Distribute,
            restart_spread: 0.25,
            fit: FitConfig::default(),
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::config("restarts", "must be at least 1"));
        }
        if let Some(k) = self.folds {
            if k < 2 {
                return Err(Error::config("folds", "must be at least 2"));
            }
            if matches!(self.protocol, Protocol::JuraCd { .. }) {
                return Err(Error::config("folds", "not supported by the jura-cd protocol"));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank", "must be at least 1"));
        }
        if !(self.restart_spread >= 0.0 && self.restart_spread.is_finite()) {
            return Err(Error::config("restart_spread", "must be finite and non-negative"));
        }
        match &self.protocol {
            Protocol::Synthetic { data, train } => {
                if self.folds.is_none() && (*train == 0 || *train >= data.n) {
                    return Err(Error::config("protocol.train", format!("must be in 1..{}", data.n)));
                }
            }
            _ => {
                if self.targets.is_empty() {
                    return Err(Error::config("targets", "need at least one target"));
                }
            }
        }
        if !(self.fit.init_lengthscale > 0.0 && self.fit.init_noise_variance > 0.0) {
            return Err(Error::config("fit", "initial length-scale and noise variance must be positive"));
        }
        Ok(())
    }
}

/// One train/test split. Non-finite training targets are unobserved; non-finite
/// test targets are not scored.
#[derive(Clone, Debug)]
pub struct Split {
    pub x_train: DMatrix<f64>,
    pub y_train: DMatrix<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DMatrix<f64>,
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn fold_splits(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<Split>> {
    let n = x.nrows();
    if k > n {
        return Err(Error::config("folds", format!("more folds than points ({n})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f01d));
    Ok((0..k)
        .map(|f| {
            let mut test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % k == f).map(|(_, &r)| r).collect();
            let mut train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % k != f).map(|(_, &r)| r).collect();
            test.sort_unstable();
            train.sort_unstable();
            Split {
                x_train: x.select_rows(train.iter()),
                y_train: y.select_rows(train.iter()),
                x_test: x.select_rows(test.iter()),
                y_test: y.select_rows(test.iter()),
            }
        })
        .collect())
}

/// Builds the splits for a protocol, with task names.
pub fn prepare_splits(config: &ExperimentConfig) -> Result<(Vec<Split>, Vec<String>)> {
    match &config.protocol {
        Protocol::JuraCd { data_dir } => {
            let jura = load_jura(data_dir, &config.targets)?;
            let (train, test) = (jura.train, jura.test);
            let mut side = test.y.clone();
            side.column_mut(0).fill(f64::NAN);
            let mut truth = test.y.clone();
            for d in 1..truth.ncols() {
                truth.column_mut(d).fill(f64::NAN);
            }
            let split = Split {
                x_train: stack_rows(&train.x, &test.x),
                y_train: stack_rows(&train.y, &side),
                x_test: test.x,
                y_test: truth,
            };
            Ok((vec![split], train.task_names))
        }
        Protocol::JuraAll { data_dir } => {
            let jura = load_jura(data_dir, &config.targets)?;
            let names = jura.train.task_names.clone();
            let splits = match config.folds {
                Some(k) => fold_splits(
                    &stack_rows(&jura.train.x, &jura.test.x),
                    &stack_rows(&jura.train.y, &jura.test.y),
                    k,
                    config.seed,
                )?,
                None => vec![Split {
                    x_train: jura.train.x,
                    y_train: jura.train.y,
                    x_test: jura.test.x,
                    y_test: jura.test.y,
                }],
            };
            Ok((splits, names))
        }
        Protocol::Synthetic { data, train } => {
            let s = generate_synthetic(data)?;
            let ds = s.dataset;
            let splits = match config.folds {
                Some(k) => fold_splits(&ds.x, &ds.y, k, config.seed)?,
                None => {
                    let n = ds.len();
                    vec![Split {
                        x_train: ds.x.rows(0, *train).into_owned(),
                        y_train: ds.y.rows(0, *train).into_owned(),
                        x_test: ds.x.rows(*train, n - train).into_owned(),
                        y_test: ds.y.rows(*train, n - train).into_owned(),
                    }]
                }
            };
            Ok((splits, ds.task_names))
        }
    }
}

/// Step-1 starting points for a restart: the configured point for restart 0,
/// log-normal perturbations of it otherwise.
pub fn restart_inits(config: &ExperimentConfig, restart: usize, tasks: usize, inputs: usize) -> Result<Vec<LatentProcessParams>> {
    let base = config.fit.initial_params(inputs)?;
    if restart == 0 || config.restart_spread == 0.0 {
        return Ok(vec![base; tasks]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(restart as u64);
    let dist = LogNormal::new(0.0, config.restart_spread).map_err(|e| Error::config("restart_spread", e.to_string()))?;
    (0..tasks)
        .map(|_| {
            let scales: Vec<f64> = base.kernel.lengthscales().iter().map(|a| a * rng.sample(dist)).collect();
            let noise = base.noise_std * rng.sample(dist);
            LatentProcessParams::new(base.kernel.with_lengthscales(scales)?, noise)
        })
        .collect()
}

/// Original-space predictions of the configured model and the independent-GP
/// baseline on one split.
#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub model: DMatrix<f64>,
    pub baseline: DMatrix<f64>,
    pub model_time: Duration,
    pub baseline_time: Duration,
    pub step2_time: Duration,
}

pub fn run_split(config: &ExperimentConfig, split: &Split, inits: &[LatentProcessParams]) -> Result<SplitOutcome> {
    let records = fit_records(&split.y_train, config.log_transform)?;
    let y = transform(&split.y_train, &records)?;
    let x = &split.x_train;
    let d = y.ncols();

    let baseline = IndependentGps::fit_with_inits(x, &y, inits, &config.fit)?;
    let baseline_time = baseline.fit_time();
    let baseline_pred = inverse_transform(&baseline.predict(&split.x_test)?.mean, &records)?;

    let (model_pred, model_time, step2_time) = match config.model {
        ModelChoice::Gp => (baseline_pred.clone(), baseline_time, Duration::ZERO),
        ModelChoice::Emgpr => {
            let m = fit_from_step1(x, &y, &baseline.params(), &config.fit, baseline_time)?;
            let t = m.timings();
            (m.predict(&split.x_test)?.mean, t.step1 + t.step2, t.step2)
        }
        ModelChoice::EmgprEnsemble => {
            let ens = EnsembleConfig {
                batch_size: config.batch_size,
                leftover: config.leftover,
                fit: config.fit.clone(),
            };
            let m = fit_ensemble_from_step1(x, &y, baseline.params(), &ens, baseline_time)?;
            let t = m.timings();
            (m.predict(&split.x_test)?.mean, t.step1 + t.step2, t.step2)
        }
        ModelChoice::Icm => {
            if config.rank > d {
                return Err(Error::config("rank", format!("must not exceed the task count {d}")));
            }
            let m = fit_icm_from(x, &y, config.rank, &inits[0], &config.fit)?;
            let t = m.timings();
            (m.predict(&split.x_test)?.mean, t.step2, t.step2)
        }
    };
    let model = if config.model == ModelChoice::Gp {
        model_pred
    } else {
        inverse_transform(&model_pred, &records)?
    };
    Ok(SplitOutcome {
        model,
        baseline: baseline_pred,
        model_time,
        baseline_time,
        step2_time,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fit_seconds: f64,
    pub baseline_seconds: f64,
    pub step2_seconds: f64,
    /// Fit time over the baseline fit time.
    pub normalized_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub restart: usize,
    pub model: Metrics,
    pub baseline: Metrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<Timing>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub task: String,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub mse_mean: f64,
    pub mse_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: Vec<TaskAggregate>,
    pub overall_mae_mean: f64,
    pub overall_mae_sd: f64,
    pub overall_mse_mean: f64,
    pub overall_mse_sd: f64,
}

impl Aggregate {
    pub fn from_metrics(metrics: &[&Metrics], names: &[String]) -> Self {
        let tasks = metrics[0]
            .tasks
            .iter()
            .map(|t| {
                let mae: Vec<f64> = metrics.iter().map(|m| m.task(t.task).map_or(f64::NAN, |x| x.mae)).collect();
                let mse: Vec<f64> = metrics.iter().map(|m| m.task(t.task).map_or(f64::NAN, |x| x.mse)).collect();
                let (mae_mean, mae_sd) = mean_sd(&mae);
                let (mse_mean, mse_sd) = mean_sd(&mse);
                TaskAggregate {
                    task: names[t.task].clone(),
                    mae_mean,
                    mae_sd,
                    mse_mean,
                    mse_sd,
                }
            })
            .collect();
        let (overall_mae_mean, overall_mae_sd) = mean_sd(&metrics.iter().map(|m| m.overall_mae).collect::<Vec<_>>());
        let (overall_mse_mean, overall_mse_sd) = mean_sd(&metrics.iter().map(|m| m.overall_mse).collect::<Vec<_>>());
        Aggregate {
            tasks,
            overall_mae_mean,
            overall_mae_sd,
            overall_mse_mean,
            overall_mse_sd,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskAggregate> {
        self.tasks.iter().find(|t| t.task == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: Aggregate,
    pub baseline: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalized_time_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    /// Standard deviations (normalization and over restarts) divide by the count.
    pub sd_convention: String,
    pub tasks: Vec<String>,
    pub restarts: Vec<RestartRecord>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Summary recomputed from the stored per-restart metrics.
    pub fn recompute_summary(&self) -> Summary {
        summarize(&self.restarts, &self.tasks)
    }
}

fn summarize(restarts: &[RestartRecord], names: &[String]) -> Summary {
    let model: Vec<&Metrics> = restarts.iter().map(|r| &r.model).collect();
    let baseline: Vec<&Metrics> = restarts.iter().map(|r| &r.baseline).collect();
    let times: Vec<f64> = restarts.iter().filter_map(|r| r.timing.as_ref().map(|t| t.normalized_time)).collect();
    Summary {
        model: Aggregate::from_metrics(&model, names),
        baseline: Aggregate::from_metrics(&baseline, names),
        normalized_time_mean: (!times.is_empty()).then(|| mean_sd(&times).0),
    }
}

fn run_restart(config: &ExperimentConfig, splits: &[Split], restart: usize) -> Result<RestartRecord> {
    let tasks = splits[0].y_train.ncols();
    let inits = restart_inits(config, restart, tasks, splits[0].x_train.ncols())?;
    let outcomes = splits
        .iter()
        .map(|s| run_split(config, s, &inits))
        .collect::<Result<Vec<_>>>()?;
    let mut model = outcomes[0].model.clone();
    let mut baseline = outcomes[0].baseline.clone();
    let mut truth = splits[0].y_test.clone();
    for (o, s) in outcomes.iter().zip(splits).skip(1) {
        model = stack_rows(&model, &o.model);
        baseline = stack_rows(&baseline, &o.baseline);
        truth = stack_rows(&truth, &s.y_test);
    }
    let timing = config.timing.then(|| {
        let fit: Duration = outcomes.iter().map(|o| o.model_time).sum();
        let base: Duration = outcomes.iter().map(|o| o.baseline_time).sum();
        let step2: Duration = outcomes.iter().map(|o| o.step2_time).sum();
        Timing {
            fit_seconds: fit.as_secs_f64(),
            baseline_seconds: base.as_secs_f64(),
            step2_seconds: step2.as_secs_f64(),
            normalized_time: fit.as_secs_f64() / base.as_secs_f64().max(f64::MIN_POSITIVE),
        }
    });
    Ok(RestartRecord {
        restart,
        model: evaluate_original(&model, &truth)?,
        baseline: evaluate_original(&baseline, &truth)?,
        timing,
    })
}

/// Runs every restart of the configured protocol and aggregates the scores.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let (splits, names) = prepare_splits(config)?;
    run_on_splits(config, &splits, names)
}

/// As [`run_experiment`] with splits supplied by the caller.
pub fn run_on_splits(config: &ExperimentConfig, splits: &[Split], names: Vec<String>) -> Result<ExperimentReport> {
    config.validate()?;
    if splits.is_empty() {
        return Err(Error::config("protocol", "no splits"));
    }
    let one = |r: usize| run_restart(config, splits, r);
    let restarts: Vec<RestartRecord> = match config.fit.parallelism {
        Parallelism::Sequential => (0..config.restarts).map(one).collect::<Result<_>>()?,
        Parallelism::Parallel => (0..config.restarts).into_par_iter().map(one).collect::<Result<_>>()?,
    };
    let summary = summarize(&restarts, &names);
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        sd_convention: "population".into(),
        tasks: names,
        restarts,
        summary,
    })
}

/// Aligned text summary of a report.
pub fn format_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let model = report.config.model.to_string();
    let _ = writeln!(out, "{:<15} {:<8} {:>18} {:>18}", "model", "task", "MAE", "MSE");
    let rows = [(model.as_str(), &report.summary.model), ("gp", &report.summary.baseline)];
    for (name, agg) in rows {
        for t in &agg.tasks {
            let _ = writeln!(
                out,
                "{:<15} {:<8} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}",
                name, t.task, t.mae_mean, t.mae_sd, t.mse_mean, t.mse_sd
            );
        }
        let _ = writeln!(
            out,
            "{:<15} {:<8} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}",
            name, "overall", agg.overall_mae_mean, agg.overall_mae_sd, agg.overall_mse_mean, agg.overall_mse_sd
        );
    }
    if let Some(t) = report.summary.normalized_time_mean {
        let _ = writeln!(out, "normalized time: {t:.2}");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N0")]
    pub n0: usize,
    pub task: String,
    #[serde(rename = "MAE_mean")]
    pub mae_mean: f64,
    #[serde(rename = "MAE_sd")]
    pub mae_sd: f64,
}

/// Ensemble scores for each mini-batch size, one row per task plus `overall`.
pub fn run_sweep(config: &ExperimentConfig, batch_sizes: &[usize]) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let (splits, names) = prepare_splits(config)?;
    let mut rows = Vec::new();
    for &n0 in batch_sizes {
        let cfg = ExperimentConfig {
            model: ModelChoice::EmgprEnsemble,
            batch_size: Some(n0),
            ..config.clone()
        };
        let report = run_on_splits(&cfg, &splits, names.clone())?;
        let agg = &report.summary.model;
        for t in &agg.tasks {
            rows.push(SweepRow {
                n0,
                task: t.task.clone(),
                mae_mean: t.mae_mean,
                mae_sd: t.mae_sd,
            });
        }
        rows.push(SweepRow {
            n0,
            task: "overall".into(),
            mae_mean: agg.overall_mae_mean,
            mae_sd: agg.overall_mae_sd,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::InvalidParameter(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
