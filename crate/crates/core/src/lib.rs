//! Coupled variational autoencoder.
//!
//! * [`coupling`]: coupled logarithm/exponential and log-space power means.
//! * [`sampling`]: seeded streams, Student's-t latent noise, log-densities.
//! * [`autodiff`]: reverse-mode graph engine and Adam.
//! * [`mnist`]: IDX parsing and batching.
//! * [`model`]: encoder, decoder, reparameterization and loss.
//! * [`train`]: deterministic training, checkpoints, sweeps.
//! * [`metrics`]: decisiveness / accuracy / robustness.
//! * [`figures`]: latent scatter, likelihood histogram, image grids.

pub mod autodiff;
pub mod coupling;
pub mod error;
pub mod figures;
pub mod metrics;
pub mod mnist;
pub mod model;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
