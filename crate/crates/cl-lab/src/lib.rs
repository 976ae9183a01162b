//! Continual-learning laboratory.
//!
//! Trains four architectures (MLP, ConvGRU, Bi-ConvGRU, reduced-width
//! ResNet) under three strategies (naive SGD, Experience Replay,
//! Learning-without-Forgetting) on Split MNIST and desk-scale Split
//! CIFAR-100, and instruments structural and representational collapse
//! via the effective rank of weight matrices and penultimate activations.

pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod plot;
pub mod runner;
pub mod strategies;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
