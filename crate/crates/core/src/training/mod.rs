//! Optimizer, training loop, metrics, run configuration and sweeps.

pub mod adam;
pub mod config;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod train;

pub use crate::capsnet::LabelMode;
pub use adam::Adam;
pub use config::{split_pair, ModelKind, RunConfig, CONFIG_KEYS};
pub use grid::{experiment_grid, render_grid, GridAxis, GridRow};
pub use metrics::{accuracy, confusion, metric_name, EpochRecord, Metrics};
pub use model::{Head, Inference, Model, Output};
pub use train::{evaluate, train, train_with, Dataset, Evaluation, Prepared, TrainOutcome};
