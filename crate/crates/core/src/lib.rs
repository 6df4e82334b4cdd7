//! Pruning at initialization for offline reinforcement learning.
//!
//! SNIP and GraSP masks are computed once from a data batch before training
//! and enforced on every network for the rest of the run. The crate carries
//! its own small autodiff engine (with Hessian-vector products), toy
//! continuous-control environments with scripted experts, Behavior Cloning
//! and BCQ agents, COO checkpointing with a byte-accounting model, and the
//! experiment harness that ties them together.

pub mod dataset;
pub mod env;
pub mod error;
pub mod graph;
pub mod harness;
pub mod mlp;
pub mod optim;
pub mod pruning;
pub mod rl;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
