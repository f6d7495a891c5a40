//! Empirical-Bayes identification of linear systems whose input is only
//! partially known.
//!
//! The output `y = W g + ε` is the convolution of an impulse response `g` with
//! an input `w`; both carry Gaussian-process priors and `w` may also be
//! measured with noise, `v = w + η`. Hyperparameters are estimated with EM using
//! one of three E-steps: an exact Gaussian posterior when the input prior is
//! degenerate, a Gibbs sampler, or a mean-field variational approximation.

pub mod bench;
pub mod conditionals;
pub mod em;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod factor;
pub mod gibbs;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod moments;
pub mod priors;
pub mod toeplitz;
pub mod variational;

pub use error::{Error, Result};
