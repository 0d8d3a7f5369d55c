use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// Per-task affine standardization, optionally after a log transform.
/// Standard deviations divide by `N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: f64,
    pub std: f64,
    pub log_transformed: bool,
}

impl NormalizationRecord {
    pub fn identity() -> Self {
        NormalizationRecord {
            mean: 0.0,
            std: 1.0,
            log_transformed: false,
        }
    }

    /// Statistics of `values` (after the log, if requested).
    pub fn fit(values: &[f64], log_transform: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("cannot normalize an empty task".into()));
        }
        let v = values
            .iter()
            .map(|&v| Self::pre(v, log_transform))
            .collect::<Result<Vec<_>>>()?;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidParameter(format!("task has zero spread (std {std})")));
        }
        Ok(NormalizationRecord {
            mean,
            std,
            log_transformed: log_transform,
        })
    }

    fn pre(v: f64, log: bool) -> Result<f64> {
        if !log {
            return Ok(v);
        }
        if v <= 0.0 {
            return Err(Error::InvalidParameter(format!("log transform needs positive values, got {v}")));
        }
        Ok(v.ln())
    }

    pub fn forward(&self, v: f64) -> Result<f64> {
        Ok((Self::pre(v, self.log_transformed)? - self.mean) / self.std)
    }

    pub fn inverse(&self, z: f64) -> f64 {
        let v = z * self.std + self.mean;
        if self.log_transformed {
            v.exp()
        } else {
            v
        }
    }
}

/// One record per column of `y`, ignoring non-finite entries.
pub fn fit_records(y: &DMatrix<f64>, log_transform: bool) -> Result<Vec<NormalizationRecord>> {
    y.column_iter()
        .enumerate()
        .map(|(d, col)| {
            let vals: Vec<f64> = col.iter().copied().filter(|v| v.is_finite()).collect();
            NormalizationRecord::fit(&vals, log_transform).map_err(|e| e.in_task(d))
        })
        .collect()
}

/// Applies the records column-wise; non-finite entries pass through.
pub fn transform(y: &DMatrix<f64>, records: &[NormalizationRecord]) -> Result<DMatrix<f64>> {
    if records.len() != y.ncols() {
        return Err(Error::dims("normalization records", y.ncols(), records.len()));
    }
    let mut out = y.clone();
    for (d, r) in records.iter().enumerate() {
        for v in out.column_mut(d).iter_mut() {
            if v.is_finite() {
                *v = r.forward(*v).map_err(|e| e.in_task(d))?;
            }
        }
    }
    Ok(out)
}

pub fn inverse_transform(z: &DMatrix<f64>, records: &[NormalizationRecord]) -> Result<DMatrix<f64>> {
    if records.len() != z.ncols() {
        return Err(Error::dims("normalization records", z.ncols(), records.len()));
    }
    Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, d| records[d].inverse(z[(i, d)])))
}

/// Standardizes both sets with statistics from `train` only.
pub fn preprocess(train: &Dataset, test: &Dataset, log_transform: bool) -> Result<((Dataset, Dataset), Vec<NormalizationRecord>)> {
    if train.task_count() != test.task_count() {
        return Err(Error::dims("test tasks vs train tasks", train.task_count(), test.task_count()));
    }
    let records = fit_records(&train.y, log_transform)?;
    let tr = Dataset {
        y: transform(&train.y, &records)?,
        ..train.clone()
    };
    let te = Dataset {
        y: transform(&test.y, &records)?,
        ..test.clone()
    };
    Ok(((tr, te), records))
}
