//! Numerical toolkit for mean-field backward doubly stochastic control.

pub mod adjoint;
pub mod bdsde;
pub mod config;
pub mod control;
pub mod drivers;
pub mod error;
pub mod fbdsde;
pub mod instances;
pub mod law;
pub mod parallel;
pub mod problem;
pub mod regression;
pub mod report;
pub mod pipeline;

pub use error::{Error, Result};
