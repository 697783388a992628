//! Position-wise partitioned Transformer inference with Segment Means
//! compression.
//!
//! The crate provides dense kernels ([`tensor`]), a reference model
//! ([`model`]), sequence partitioning and landmark compression
//! ([`partition`]), the attention evaluators and partition-aware causal
//! masks ([`attention`]), a master/worker message-passing simulator with a
//! communication ledger ([`runtime`]) and closed-form cost models
//! ([`analysis`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f64` for verification,
//! `f32` for throughput runs); the aliases below pin the common choices.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod error;
pub mod flops;
pub mod model;
pub mod partition;
pub mod runtime;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type WeightSet64 = model::WeightSet<f64>;
pub type WeightSet32 = model::WeightSet<f32>;
