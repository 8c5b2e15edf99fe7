//! Experiment harness: configs, multi-seed runs, ablation sweeps, result
//! files, comparison tables, attention export and the gradient suite.

pub mod attention;
pub mod compare;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod results;

pub use config::RunConfig;
pub use error::{exit, HarnessError, Result};
