mod binio;
pub mod baselines;
pub mod datasets;
pub mod diffmath;
mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod protocol;
pub mod rng;

pub use binio::write_atomic;
pub use error::{Error, Result};
