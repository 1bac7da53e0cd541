//! Dynamic mean field programming (DMFP) for Bayesian model-based
//! reinforcement learning.
//!
//! Given a flat Dirichlet prior over transition rows and Gaussian reward
//! posteriors, the crate propagates the posterior mean and variance of
//! Q-value iterates ([`dmfp`]), solves sampled MDPs exactly
//! ([`bellman`]), and compares the two across seeded Monte-Carlo
//! ensembles ([`harness`]).

// negated float comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod bellman;
pub mod commands;
pub mod config;
pub mod dmfp;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod parallel;
pub mod report;
pub mod sampler;
pub mod svg;
pub mod types;

pub use error::{DmfpError, Result};
pub use types::{
    dirichlet_covariance, dirichlet_mean, validate_prior, AlphaSpec, MomentField, Policy,
    PriorSpec, PriorViolation, QTable, SampledMdp,
};
