//! Minimal dense tensor engine used by the hash-routed MoE models.
//!
//! Everything is row-major and at most two-dimensional from the point of view
//! of the ops; parameters may carry higher ranks (stacked expert banks) and are
//! addressed block-wise through [`Graph::param_block`].

mod attention;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Fault, Graph, Var};
pub use optim::{clip_grad_norm, grad_norm, lr_schedule, Adam, AdamConfig};
pub use params::{AdamState, Gradients, Param, ParamId, ParamStore};
pub use real::{flush_denormals, Real};
pub use tensor::Tensor;
