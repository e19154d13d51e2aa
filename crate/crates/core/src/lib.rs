//! Adversarial masking for self-supervised pretraining of 12-lead ECG
//! encoders, built on a small reverse-mode autodiff engine.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
#[cfg(any(test, feature = "testing"))]
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
