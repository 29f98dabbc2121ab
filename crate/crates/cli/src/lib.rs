//! Workbench around the forecasting library: synthetic data generation,
//! training, evaluation, cost profiling, and hyperparameter studies, all
//! driven by a flat key=value run configuration.

pub mod commands;
pub mod config;
pub mod synth;
