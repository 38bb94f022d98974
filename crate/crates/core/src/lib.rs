//! Covariate-adjusted Gaussian graphical models estimated by nodewise
//! sparse-group lasso regressions in the natural parametrization.

pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nodewise;
pub mod pipeline;
pub mod solver;
pub mod simulation;
pub mod tuning;

pub use error::{Error, Result};
