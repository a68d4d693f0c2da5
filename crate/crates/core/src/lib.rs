//! Private and heavy-tail robust first-order optimization.
//!
//! The crate bundles synthetic data generators, loss families, a geometric
//! median-of-means gradient estimator, a Gaussian-mechanism accountant, the
//! optimizers themselves (Frank-Wolfe, projected GD, Nesterov, DP-SGD) and a
//! harness that replays the reference simulation protocols.

pub mod data_synth;
pub mod error;
pub mod losses;
pub mod optimizers;
pub mod privacy_accountant;
pub mod rng;
pub mod robust_mean;
pub mod scenarios;

pub use error::{Error, Result};

/// Dense column vector used for parameters and gradients.
pub type Vector = nalgebra::DVector<f64>;
/// Dense row-major-agnostic matrix used for design matrices and covariances.
pub type Matrix = nalgebra::DMatrix<f64>;
