//! Filesystem, dataset, and reporting companion to `elastic-core`: checkpoint
//! serialization, synthetic and IDX datasets, evaluation metrics, CSV
//! artifacts, run configuration, and the staged training pipeline behind the
//! `elastic-supernet` binary.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod stages;
