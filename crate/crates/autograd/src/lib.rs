//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`] replays
//! them in reverse to produce gradients for every node that requires one.
//! The engine is generic over [`Scalar`] so the same ops run in `f32` for
//! training and `f64` for finite-difference checks.

pub mod error;
mod float;
pub mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use error::{AutogradError, Result};
pub use float::Scalar;
pub use graph::{Graph, NodeId, NAN_CHECK_ENV};
pub use ops::{sigmoid, Activation, BatchNormState, BnMode, OpKind, PoolKind, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
