//! Fusionformer: 2D-to-3D human pose lifting with a dual-branch transformer.
//!
//! The crate is organised around a small reverse-mode autodiff tensor core
//! ([`tensor`]), transformer building blocks ([`blocks`]), the dual-branch
//! lifting model itself ([`model`]), training losses and pose metrics
//! ([`metrics`]), pose clip ingestion plus a synthetic motion generator
//! ([`data`]), and the optimizer/training loop with checkpointing ([`train`]).
//!
//! Everything runs on the CPU in f64. With the `parallel` feature (on by
//! default) the hot kernels fan out over rayon; results are bit-identical to
//! the sequential fallback because every output element is computed by the
//! same scalar recipe regardless of thread count.

pub mod blocks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
