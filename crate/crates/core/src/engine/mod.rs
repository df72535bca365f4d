//! Minimal float64 reverse-mode autodiff: tensors, a dynamic tape and AdamW.

mod graph;
mod optim;
mod tensor;

pub use graph::{sigmoid, softmax_in_place, Graph, Var};
pub use optim::{clip_grad_global_norm, global_grad_norm, AdamWConfig, AdamWState};
pub use tensor::{ParamId, ParamStore, Tensor};
