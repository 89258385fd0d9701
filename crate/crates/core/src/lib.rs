//! Bayesian time-to-first-urination admission model: data preparation,
//! posterior sampling, predictive curves, evaluation and serving.

pub mod bundle;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod evaluation;
pub mod fit;
pub mod model;
pub mod predictive;
pub mod sampler;
pub mod service;
pub mod simulate;
pub mod special;
