//! Rotating-view super-resolution for anisotropic volumes.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod hash_encoding;
pub mod metrics;
pub mod model;
pub mod neural_field;
pub mod phantom;
pub mod registration;
pub mod trainer;

pub use error::{Error, Result};
