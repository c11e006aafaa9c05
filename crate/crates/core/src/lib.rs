//! Modified natural gradient descent (Modified NGD) for over-parameterized
//! scalar-output MLPs in the neural-tangent-kernel regime.
//!
//! The crate is organised bottom-up:
//!
//! - [`datasets`]: synthetic covariate-shift regression data.
//! - [`network`]: the MLP, He initialization, exact Jacobians and the
//!   linearized predictor.
//! - [`spectral`]: thin SVD of the Jacobian, the NTK Gram matrix, the
//!   eigenvalue modification operator and implicit application of the
//!   modified inverse Fisher.
//! - [`risk`]: discrepancy statistics, the per-mode cut criterion and the
//!   generalization-error decomposition.
//! - [`dynamics`]: iterative trainers and the closed-form function-space
//!   solutions.
//! - [`io`]: CSV/JSON helpers shared by the on-disk formats.

pub mod datasets;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod network;
pub mod risk;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
