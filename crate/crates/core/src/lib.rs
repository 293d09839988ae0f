//! Subset pretraining for convolutional classifiers.
//!
//! A model is first trained on a `1/b` fraction of the training set, then
//! fine-tuned briefly on the whole set. The crate provides the pieces to run
//! and measure that protocol from scratch:
//!
//! - [`tensor`]: dense `f64` tensors, a seeded counter-based generator, and
//!   Glorot initialization.
//! - [`network`]: the conv/pool/dense classifier with exact gradients.
//! - [`optim`]: SGD, Adam, nonlinear conjugate gradient, and a step-size
//!   schedule checker.
//! - [`data`]: IDX and CIFAR loaders, synthetic data, augmentation, and
//!   subset partitioning.
//! - [`protocol`]: the two-phase runs, aggregation, the overdetermination
//!   ratio `Q = K M / P`, the cost model, and report files.
//! - [`config`]: the flat key/value configuration.

pub mod config;
pub mod data;
pub mod network;
pub mod optim;
pub mod protocol;
pub mod tensor;

pub use config::{ConfigError, ConfigMap, ExperimentConfig};
pub use data::{DataError, Dataset, SubsetPlan};
pub use network::{Batch, Network, NetworkError, NetworkSpec};
pub use protocol::{MetricsRecord, ProtocolError};
pub use tensor::{SeededRng, Tensor, TensorError};
