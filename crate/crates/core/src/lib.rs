//! Multi-stream variational autoencoder: K parallel encoder/decoder streams
//! combined through binary presence variables, with exact enumeration of all
//! presence states.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod msvae;
pub mod presets;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use msvae::{Architecture, MsVae};
