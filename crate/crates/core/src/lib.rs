//! Multi-task Gaussian process regression with sum-of-Kronecker covariances.
//!
//! The main model mixes one latent GP per task through learned weight
//! vectors and is fitted in two steps: independent per-task hyperparameter
//! fits, then a joint fit of the mixing weights. Independent GPs and the
//! intrinsic coregionalization model share the same interfaces.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod structured;

pub use data::{Dataset, Metrics, NormalizationRecord, SyntheticConfig};
pub use ensemble::{fit_ensemble, partition, predict_ensemble, EnsembleConfig, EnsembleModel, LeftoverPolicy, PartitionPlan};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, ModelChoice, Protocol};
pub use gp::{FittedTaskGP, LatentProcessParams, OptConfig, Parameterization};
pub use kernels::{GramMatrix, KernelKind, KernelSpec};
pub use model::{fit, fit_icm, EmgprModel, FitConfig, IndependentGps, ModelKind, MultiTaskPrediction, MultiTaskRegressor, Parallelism};
pub use optimizer::OptimizerSettings;
pub use structured::{StructuredCovariance, WeightSet};

pub use nalgebra::{DMatrix, DVector};
