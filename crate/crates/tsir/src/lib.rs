//! Synthetic time-series reasoning benchmark: series generation, task
//! construction, a small reverse-mode autodiff engine, four forecasting
//! architectures, training, and evaluation/reporting.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluator;
pub mod models;
pub mod trainer;
pub mod seriesgen;
pub mod taskbuilder;
pub mod util;

pub use error::{Error, Result};
