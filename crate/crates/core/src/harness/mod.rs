//! Datasets, training, evaluation and persistence.

pub mod dataset;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod train;
