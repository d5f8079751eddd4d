//! Penalized-spline mixed models fitted by REML, with simulation tools for
//! studying how time-varying subject effects distort fixed-effect inference.

pub mod basis;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
