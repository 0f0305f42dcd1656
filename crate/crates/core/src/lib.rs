//! Monocular height estimation toolkit: a scale-deformable convolution
//! operator with analytic gradients, relative-height losses and metrics, a
//! small trainable encoder-decoder, a procedural aerial-scene generator and
//! a seeded few-shot transfer benchmark.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod protocol;
pub mod real;
pub mod sdc;
pub mod seed;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Graph, NodeId, Tensor};
