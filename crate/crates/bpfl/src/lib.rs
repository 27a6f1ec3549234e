//! Desk-scale simulator for personalized federated learning with
//! heterogeneous client models and a shared lightweight bypass model.
//!
//! Clients own private architectures trained on non-IID shards; only the
//! small bypass is communicated and averaged. A channel-wise pairwise
//! softmax fuses bypass features into each local model. Everything runs on
//! an f64 tape-based autodiff core with deterministic, seed-derived
//! randomness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod runner;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
