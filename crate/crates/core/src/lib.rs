//! Deterministic simulator for serverless federated multi-task learning
//! of graph classifiers.
//!
//! Clients train a message-passing graph network plus a per-task head on
//! their own label-masked data, and every `tau` rounds average their
//! shared weights with neighbours through a doubly stochastic mixing
//! matrix while exchanging task-covariance matrices.

pub mod bounds;
pub mod error;
pub mod fedsim;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod mtl;
pub mod partition;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
