//! Decoupled shrinkage and selection for Bayesian factor analysis.
//!
//! Pipeline: simulate or load data ([`datagen`]), draw from the factor-model
//! posterior ([`gibbs`]), fit penalized point estimates over a grid of factor
//! dimensions and ℓ1 penalties ([`pfa`]), then summarize the posterior loss
//! of each estimate and pick the simplest acceptable one ([`summary`]).

pub mod bench;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod pfa;
pub mod rng;
pub mod summary;

pub use error::{Error, ErrorKind, Result};
pub use model::{
    assemble_cov, posterior_mean_cov, rmse, stein_loss, CovMatrix, LoadingsMatrix, PosteriorDraws,
    SteinEvaluator, UniquenessDiag,
};
