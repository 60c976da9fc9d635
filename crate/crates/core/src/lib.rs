//! Layer-wise CNN training engine built on channel-wise competitive
//! learning.
//!
//! Instead of backpropagating a single output loss through the whole
//! network, every convolutional layer here is trained as an independent
//! classifier: its ReLU activations are split into per-class channel
//! subsets, scored by a goodness function (mean of squared activations),
//! and optimized with a local loss — either the softmax-style CwC loss or
//! the threshold-style PvN loss. Layers are composed into CFSE blocks
//! (a standard convolution followed by a channel-wise grouped convolution),
//! scheduled by Interleaved Layer Training, and read out through one of
//! three predictor heads (Softmax, Goodness, Global Averaging).
//!
//! Module map:
//! - [`tensor`], [`conv`], [`pool`], [`norm`], [`adam`]: tensor container
//!   and layer primitives with the single-layer backward passes local
//!   training needs.
//! - [`goodness`]: goodness matrices, label masks, and the CwC/PvN losses
//!   with analytic activation gradients.
//! - [`network`]: CFSE network construction, forward orchestration, and
//!   parameter/mult-add counting.
//! - [`predictor`]: Softmax, Goodness (label-overlay), and
//!   Global-Averaging classification heads.
//! - [`ilt`]: plateau detection, schedule discovery, and the interleaved
//!   training loop.
//! - [`data`]: IDX and CIFAR-10 binary ingestion with seeded batch
//!   iteration.
//! - [`checkpoint`]: versioned binary model serialization.
//!
//! Run-configuration parsing and feature-map export live in the companion
//! CLI crate.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod goodness;
pub mod ilt;
pub mod network;
pub mod norm;
pub mod pool;
pub mod predictor;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::FeatureTensor;
