//! Bayesian single-species occupancy models as latent Gaussian models.
//!
//! The observation model is the zero-inflated binomial for aggregated
//! detection/non-detection counts. The occupancy (or detection) linear
//! predictor carries a sum of latent Gaussian components - fixed effects,
//! random-walk smooths, AR1 time effects, IID effects, areal Besag/BYM
//! fields, lattice Matern fields and separable space-time fields - all
//! specified through sparse precision matrices. Inference follows the
//! nested-Laplace recipe: an inner damped Newton solve for the latent
//! field conditional on hyperparameters, an outer exploration of the
//! hyperparameter posterior, and Gaussian-mixture marginals, samples,
//! scores and predictions on top.

pub mod components;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod likelihood;
pub mod links;
pub mod model;
pub mod oracle;
pub mod predict;
pub mod rng;
pub mod sparse;

pub use error::{Error, Result};
