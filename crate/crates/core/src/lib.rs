//! Graph neural networks with composite-kernel aggregation.
//!
//! The normalized adjacency `Â` used by GCN is an indefinite kernel over
//! the nodes. This crate composes it element-wise with a learnable
//! Gaussian kernel on autoencoder embeddings, `K̂ = K ⊙ Â`, and uses the
//! result as an extra aggregation branch (CKGCN). The same composition
//! applied to per-head attention matrices gives CKGAT.
//!
//! Everything is built on a small reverse-mode autodiff tape over dense
//! `f64` matrices plus a sparse-aggregation primitive whose gradient
//! reaches both the dense operand and the sparse values.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod models;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, SparseMatrix};
pub use tensor::Tensor;
