//! Synthetic EHR cohorts, code and patient embedding pre-training, and
//! onset predictors with their evaluation.

pub mod autoencoder;
pub mod code2vec;
pub mod cohort;
pub mod config;
pub mod dataset;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod fit;
pub mod models;
pub mod train;

pub use error::{CoreError, Result};
