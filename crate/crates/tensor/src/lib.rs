//! Minimal numerical core: dense row-major `f64` tensors, a reverse-mode
//! differentiation tape, feed-forward networks with batch normalization and
//! the Adam optimizer.
//!
//! All arithmetic is 64-bit so gradient checks can be held to tight
//! tolerances.

mod adam;
mod error;
mod graph;
mod mlp;
mod tensor;

pub use adam::Adam;
pub use error::TensorError;
pub use graph::{BatchStats, CustomOp, Gradients, Graph, Var};
pub use mlp::{Activation, BatchNorm, Layer, MlpNet, Mode, Recorded, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
