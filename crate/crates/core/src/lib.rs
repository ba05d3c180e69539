//! Data-free attention sublayer scoring and pruning.
//!
//! The crate scores each self-attention sublayer of a decoder-only
//! transformer by the Frobenius norm of its query/key gate matrix
//! `‖W_q W_kᵀ‖_F`, turns the scores into one-shot pruning plans, and ships a
//! small transformer engine plus data-driven importance measures for checking
//! the scores against what the sublayers actually do.
//!
//! All numeric code is generic over [`Scalar`] (`f32` and `f64`); the
//! aliases below fix the working precision used by checkpoints and the CLI.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod importance;
pub mod memory;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod sim;
pub mod tensor;

pub use error::{Error, ErrorKind, HeaderError, Result};
pub use scalar::Scalar;
pub use tensor::{Activation, Matrix, Stabilizer, SupportMask};

/// Working-precision matrix.
pub type Tensor2D = Matrix<f32>;
/// Working-precision vector.
pub type Vector = Vec<f32>;
/// Working-precision model.
pub type Model = sim::Model<f32>;
/// Working-precision activation trace.
pub type ForwardTrace = sim::ForwardTrace<f32>;
