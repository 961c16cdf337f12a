//! Boosted early-exit networks.
//!
//! A multi-exit network whose exit `n` predicts with the ensemble
//! `F_n = t_n · F_{n-1} + f_n`: each head learns a correction on top of a
//! temperature-weakened ensemble of the shallower heads. The crate covers
//!
//! - [`model`]: toy multi-exit backbones, the combine rule, stop-gradient
//!   and gradient-rescaling backward semantics, checkpoints;
//! - [`trainer`]: joint momentum-SGD training with valid-sample diagnostics
//!   and finite-difference gradient checks;
//! - [`budget`]: exit-probability solving and confidence-threshold
//!   calibration for budgeted-batch inference;
//! - [`eval`]: anytime and budgeted-batch evaluation, cost accounting,
//!   exit galleries and the logit dump format;
//! - [`data`]: small synthetic datasets.
//!
//! Batch work runs on rayon with the default `parallel` feature. Results are
//! bitwise identical without it.

pub mod budget;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
