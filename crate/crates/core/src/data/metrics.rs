use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::preprocess::{inverse_transform, NormalizationRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Column index of the task.
    pub task: usize,
    pub mae: f64,
    pub mse: f64,
    pub count: usize,
}

/// Errors over the scored entries; tasks without any scored entry are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tasks: Vec<TaskMetrics>,
    pub overall_mae: f64,
    pub overall_mse: f64,
}

impl Metrics {
    pub fn task(&self, task: usize) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Scores standardized predictions against targets in original units.
pub fn evaluate(pred: &DMatrix<f64>, truth: &DMatrix<f64>, records: &[NormalizationRecord]) -> Result<Metrics> {
    evaluate_original(&inverse_transform(pred, records)?, truth)
}

/// Scores predictions already in original units. Non-finite truth entries are not scored.
pub fn evaluate_original(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::dims("prediction entries vs truth", truth.len(), pred.len()));
    }
    let mut tasks = Vec::new();
    let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
    for d in 0..truth.ncols() {
        let (mut a, mut s, mut c) = (0.0, 0.0, 0usize);
        for i in 0..truth.nrows() {
            let t = truth[(i, d)];
            if t.is_finite() {
                let e = pred[(i, d)] - t;
                a += e.abs();
                s += e * e;
                c += 1;
            }
        }
        if c > 0 {
            tasks.push(TaskMetrics {
                task: d,
                mae: a / c as f64,
                mse: s / c as f64,
                count: c,
            });
            abs += a;
            sq += s;
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::InvalidParameter("nothing to score".into()));
    }
    Ok(Metrics {
        tasks,
        overall_mae: abs / count as f64,
        overall_mse: sq / count as f64,
    })
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
