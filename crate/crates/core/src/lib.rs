//! Windowed multi-modal fusion transformer at desk scale.
//!
//! The crate provides, bottom up:
//!
//! - a deterministic dense tensor core with reverse-mode autodiff
//!   ([`tensor`]), generic over `f32` (train mode) and `f64` (verification
//!   mode);
//! - window partitioning, shifted windows, relative position bias and the
//!   self/cross attention kernels ([`attention`]);
//! - a four-stage hierarchical image backbone ([`backbone`]);
//! - dual-branch image-modality fusion blocks, the meta-data MLP and the
//!   heterogeneous post-fusion block ([`fusion`]);
//! - the full model with multi-label head, loss and training loop
//!   ([`model`], [`train`]);
//! - manifest/synthetic data handling ([`data`], [`synth`]), evaluation
//!   metrics ([`metrics`]), checkpoints, run configs and attention export.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Result, TfkError};
pub use scalar::Real;
pub use tensor::{grad_check, NoGradGuard, Tensor};
