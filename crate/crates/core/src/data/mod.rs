//! Datasets, preprocessing, metrics and the synthetic generator.

mod dataset;
mod metrics;
mod preprocess;
mod synthetic;

pub use dataset::{load_csv, load_jura, write_csv, Dataset, JuraData, JURA_TEST_FILE, JURA_TRAIN_FILE};
pub use metrics::{evaluate, evaluate_original, mean_sd, Metrics, TaskMetrics};
pub use preprocess::{fit_records, inverse_transform, preprocess, transform, NormalizationRecord};
pub use synthetic::{generate_synthetic, Mixing, SyntheticConfig, SyntheticData};
