//! Deterministic desk-scale simulator of decentralized learning through
//! multi-headed distillation.
//!
//! Clients hold skewed private shards and train small MLP classifiers with a
//! main head and a chain of auxiliary heads. They exchange knowledge only via
//! predictions and embeddings on a shared public split: auxiliary head `k`
//! distills from the most confident rank-`k-1` head among its teachers, and
//! embeddings are pulled together after L2 normalization.

pub mod analysis;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod verify;

pub use error::{MhdError, Result};
