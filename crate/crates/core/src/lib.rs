pub mod artifact;
pub mod bayes;
pub mod cli;
pub mod error;
pub mod hazard;
pub mod io;
pub mod longitudinal;
pub mod mortality;
pub mod risk;
pub mod screening;
pub mod service;
pub mod spline;
pub mod stats;
pub mod synthetic;
pub mod validation;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
