//! Attention with a latent bottleneck: token mixing routed through M
//! learnable latent tokens so cost grows linearly in sequence length,
//! plus the training loop, spectral analysis and synthetic PDE data
//! needed to exercise it. Everything numeric is implemented here on a
//! flat row-major tensor type; no external linear algebra.

// Validation guards are written `!(x > 0.0)` on purpose: the negated form
// rejects NaN, which `x <= 0.0` would let through. Indexed loops are kept
// where they mirror the subscripts in the math they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod darcy;
pub mod data;
pub mod error;
pub mod linalg;
pub mod mixer;
pub mod model;
pub mod optim;
mod parallel;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
