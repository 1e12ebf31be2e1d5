//! Layer-wise token self-distillation for MOS prediction.
//!
//! The crate covers the whole pipeline: corpus manifests and batching, a
//! layer-exposing speech encoder interface, per-layer k-means tokenization,
//! the MOS network with auxiliary heads, training, evaluation metrics and
//! canonical correlation analysis of learned representations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod cca;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod ssl_backend;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
