//! Offline alternating model-policy learning (AMPL).
//!
//! The crate bundles the continuous pipeline (dynamics ensemble, fixed-point
//! importance-weight estimator, GAN-regularized actor-critic and the training
//! orchestrator) with exact finite-MDP oracles used to verify the estimator's
//! identities and bounds.

pub mod agent;
pub mod buffer;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod miw;
pub mod nn;
pub mod rng;
pub mod tabular;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
