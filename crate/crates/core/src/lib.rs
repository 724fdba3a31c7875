//! Multi-domain calibration as a tool for out-of-domain generalization.
//!
//! The crate is split by responsibility:
//!
//! * [`env_data`]: environment-indexed datasets, file formats and the synthetic
//!   generators (two Gaussian settings and the Two-Bit environments).
//! * [`metrics`]: ECE, Brier decomposition, kernel MMCE, CLOvE and IRMv1 penalties.
//! * [`calibrate`]: Platt scaling, isotonic regression and the naive / robust
//!   multi-environment recalibrators.
//! * [`models`]: linear, MLP and two-moment predictors, penalized objectives,
//!   analytic gradients and training.
//! * [`landscape`]: exact population penalties over odd Two-Bit classifiers.
//! * [`theory`]: numerical checks of the linear-Gaussian invariance results.
//! * [`selection`]: worst-case / thresholded ECE model selection.

pub mod calibrate;
pub mod env_data;
mod error;
pub mod landscape;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod selection;
pub mod theory;

pub use error::{Error, Result};
