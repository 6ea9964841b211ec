//! Stochastic magnitude-gated weight pruning with regularization-driven node
//! pruning, on a small from-scratch neural network stack.
//!
//! Every minibatch of a pruning session runs
//! gradient (data + penalty) → optimizer update → Bernoulli gate sampling on
//! the updated weights → mask application. Weights with small magnitude are
//! likely to be zeroed; weight decay keeps them small, which over time empties
//! whole nodes.

pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
