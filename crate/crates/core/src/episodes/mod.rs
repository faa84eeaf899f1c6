//! Synthetic benchmark, episode sampling, metrics, configuration,
//! training, evaluation and checkpoints.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod metrics;
pub mod persistence;
pub mod sample;
pub mod train;
