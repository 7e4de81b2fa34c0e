//! A from-scratch convolutional network for MNIST digit classification.
//!
//! * [`tensor`]: dense row-major tensors, GEMM and im2col
//! * [`mnist`]: IDX parsing, normalization, one-hot targets, batching
//! * [`layers`] and [`model`]: forward/backward passes and layer stacks
//! * [`training`]: costs, SGD and the epoch loop
//! * [`gradcheck`]: finite-difference verification of the backward passes
//! * [`experiments`]: the six hidden-layer arrangements and their report
//! * [`checkpoint`]: bit-exact model files

pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod layers;
pub mod mnist;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::{Activation, LayerSpec, Pass};
pub use mnist::{Dataset, Mnist};
pub use model::Model;
pub use tensor::Tensor;
pub use training::{EpochMetrics, LossKind, TrainConfig};
