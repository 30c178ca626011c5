//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! The engine is built around a [`Tape`]: a per-step record of primitive
//! operations over [`Tensor`] values. Trainable tensors live in a
//! [`ParamSet`] and enter a tape as leaves; [`Tape::backward`] accumulates
//! gradients back into the owning set. Gradients are never zeroed
//! implicitly.
//!
//! Besides the tape, the crate provides slice-level distribution utilities
//! ([`dist`]), a central finite-difference checker ([`gradcheck`]), the
//! adaptive-moment optimizer ([`optim`]) and the checkpoint format
//! ([`checkpoint`]).

pub mod checkpoint;
pub mod dist;
mod error;
pub mod gradcheck;
pub mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;
