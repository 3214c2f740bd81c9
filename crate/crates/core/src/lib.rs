//! Regression-adjusted average treatment effect estimation for completely
//! randomized experiments.

pub mod cv;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod io;
pub mod model;
pub mod random;
pub mod sim;
pub mod solver;

pub use error::{AteError, Result};
