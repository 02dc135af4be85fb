//! Regularized Graph Infomax: self-supervised node embeddings trained by
//! reconstructing a local view from a propagated global view, with variance
//! and covariance regularisation.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod graph;
pub mod loss;
pub mod parallel;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
