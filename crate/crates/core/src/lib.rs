//! Multivariate functional mixed models for repeated biomechanical curves.

pub mod basis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod export;
pub mod inference;
pub mod ingest;
pub mod lmm;
pub mod model;
pub mod mvfpca;
pub mod numeric;
pub mod rng;
pub mod sim;
pub mod unstructured;

pub use error::{Error, Result};
