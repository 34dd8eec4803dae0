//! Numerical core for a multi-scale feature-fusion detection stack.
//!
//! The crate provides a reverse-mode autodiff graph over dense 4-D tensors,
//! deterministic parameter management, the fusion neck (context augmentation,
//! across-layer weighting, adaptive blending), a compact anchor-free detector,
//! detection metrics, and a synthetic data pipeline. Everything is generic
//! over the scalar type: `f32` for training speed, `f64` for verification.

pub mod afw;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fpn;
pub mod gradcheck;
pub mod graph;
pub mod ica;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod reference;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use graph::{Graph, ValueId};
pub use kernels::Axis;
pub use params::{Init, ParamStore};
pub use tensor::{Precision, Scalar, Shape4, Tensor4};
