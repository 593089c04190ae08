//! Prototype tokens in the fusion space of a dual-modal cross-attention encoder,
//! with the comparators, data generator and metrics needed to study them.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod baselines;
pub mod data;
pub mod error;
mod files;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sdpt;
pub mod selftrain;
pub mod tensors;
pub mod train;

pub use error::{Error, Result};
pub use tensors::TensorMap;
