//! Deterministic simulator for differentially private federated prompt
//! learning: low-rank factorized local prompts with a residual, gradient
//! perturbation in the factor space, local and global Gaussian noise,
//! federated aggregation, budget accounting, an experiment harness and a
//! shadow-model membership-inference attack.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod factorization;
pub mod federation;
pub mod harness;
pub mod mia;
pub mod numeric;
pub mod privacy;

pub use config::{RunConfig, VariantMode};
pub use error::{Error, Result};
pub use numeric::{Matrix, RngStream};
