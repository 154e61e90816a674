//! Deterministic simulator for federated active learning.
//!
//! Clients hold disjoint, equally sized shares of a dataset partitioned with a
//! Dirichlet prior. Each active-learning round every client queries labels for
//! a fixed budget of its unlabeled pool, then a global model is retrained with
//! FedAvg. The crate provides the partitioner, an MLP with explicit
//! backpropagation, FedAvg and local-only training, the query strategies
//! (including the two-step LoGo selector), and the evaluation machinery used to
//! compare strategies across seeds.

pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod strategies;

pub use error::{FalError, Result};
