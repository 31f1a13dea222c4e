//! Desk-scale laboratory for efficient classifier-free guidance.
//!
//! Score backends (an exact Gaussian-mixture oracle and a small trained MLP)
//! feed a deterministic sampler whose per-step guidance is chosen by a
//! controller: fixed policies, Adaptive Guidance, or LinearAG. Policies can be
//! searched by differentiating through the unrolled sampler.

// `!(x > 0.0)` is the NaN-rejecting form used for validation throughout, and
// the small per-coordinate kernels read clearer as index loops.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod linear;
pub mod score;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
