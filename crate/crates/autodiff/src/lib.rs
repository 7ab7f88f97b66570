//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The graph is rebuilt on every forward pass. Parameters live in a
//! [`ParamStore`]; a forward pass registers them as graph leaves, `backward`
//! computes gradients, and [`Graph::accumulate_param_grads`] adds them back
//! into the store for the optimizer.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, OpKind, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
