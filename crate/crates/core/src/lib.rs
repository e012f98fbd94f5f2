//! Dual-view language model: a frozen autoregressive transformer with a
//! trainable parallel diffusion attention path over the same KV cache,
//! decoded with a lossless draft/verify loop.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod bench;
pub mod data;
pub mod error;
pub mod inference;
pub mod masking;
pub mod model;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{OrthrusError, Result};
