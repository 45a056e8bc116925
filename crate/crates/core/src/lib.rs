//! Shared-latent sparse variational GP model with a regression path and a
//! probit classification path, trained by stochastic ELBO maximization.

pub mod baselines;
pub mod data;
pub mod error;
pub mod kernels;
pub mod latent;
pub mod numerics;
pub mod optim;
pub mod likelihoods;
pub mod model;
pub mod svgp;

pub use error::{LdgdError, Result};
