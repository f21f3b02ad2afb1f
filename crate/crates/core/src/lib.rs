//! Sparsity-invariant convolutional networks for depth completion, with
//! classical baselines, evaluation metrics and scan fusion.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
