//! Pair-of-pairs difference-in-differences.
//!
//! Survey clusters from an early and a late period are paired by location
//! within each country, the pairs are classified by how malaria prevalence
//! changed, treated (high-low) and control (high-high) pairs are selected
//! under covariate-balance constraints, the partly missing low-birth-weight
//! outcome is multiply imputed, and a random-intercept linear probability
//! model is fitted per completed data set and pooled.

pub mod assignment;
pub mod cardmatch;
pub mod classify;
pub mod config;
pub mod error;
pub mod geomatch;
pub mod impute;
pub mod infer;
pub mod ingest;
pub mod io;
pub mod logistic;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sensan;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
