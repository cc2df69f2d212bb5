//! Causal effect estimation on networked units with hidden confounders.
//!
//! The crate recovers three blocks of latent confounders from observed
//! covariates and the interference graph — confounders of the unit's own
//! treatment, of the outcome, and of the neighbors' treatments — with an
//! identifiable variational model, then regresses outcomes on the recovered
//! representation with a balancing penalty to estimate direct and spillover
//! treatment effects.

pub mod baselines;
pub mod datagen;
pub mod effect_estimator;
pub mod error;
pub mod evalmetrics;
pub mod ipm;
pub mod latent_model;
pub mod netgraph;
pub mod tensor;

pub use error::{Error, Result};
