//! Joint learning of a directed acyclic effective-connectivity graph and a
//! spatial-temporal classifier over multivariate time series.
//!
//! The library couples a score-based constrained optimization (augmented
//! Lagrangian over a smooth acyclicity function) with a three-layer
//! spatial-temporal DAG convolutional network, and ships the surrounding
//! machinery: synthetic SEM data generation, DAG post-processing, repeated
//! stratified cross-validation, and a reproducible CLI.

pub mod data_io;
pub mod error;
pub mod model;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
