//! Continuous nuclear pleomorphism scoring on synthetic slides.
//!
//! The pipeline has two stages: a pluggable epithelial cell detector
//! (here an oracle over synthetic ground truth) restricts analysis to
//! tumor regions, and a dense-block regression network scores
//! pleomorphism as a continuous value on the [1,3] spectrum. Tiled
//! whole-slide inference aggregates overlapping tile predictions into
//! block-level score maps, and the metrics module compares quantized
//! predictions against rater panels with quadratic-weighted kappa.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod regressor;
pub mod scalar;
pub mod score;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Scalar type used for training and persisted checkpoints.
pub type TrainScalar = f32;
/// Scalar type used by gradient checks and numeric oracles.
pub type CheckScalar = f64;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
