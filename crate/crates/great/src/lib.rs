//! Graph-regularized adversarial training for small classifiers.
//!
//! The crate trains multilayer perceptrons and small convolutional networks
//! with a combined objective: supervised loss on clean and adversarially
//! perturbed samples plus a regularizer that pulls the embeddings of
//! graph-neighboring samples together. Construction of the similarity graph,
//! the gradient-based attacks, training, and evaluation are all deterministic
//! given a seed.
//!
//! Start with [`great::TrainConfig`] and [`great::train`], or see the
//! runnable programs under `examples/`.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
mod fsutil;
pub mod graph;
pub mod great;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
