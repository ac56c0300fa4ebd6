//! Function-space priors for neural networks: RKHS-regularized MAP training against a
//! Gaussian-process prior and a matrix-free linearized Laplace posterior.

pub mod baselines;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod kernels;
pub mod laplace;
pub mod likelihood;
pub mod nn;
pub mod plot;
pub mod points;
pub mod predict;
pub mod train;

pub use error::{Error, Result};
pub use points::Points;
