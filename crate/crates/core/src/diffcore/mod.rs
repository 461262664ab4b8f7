//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
pub mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use graph::{BatchStats, BnStats, Grads, Graph, Mode, Var, ACOS_EPS};
pub(crate) use graph::{sigmoid, LN_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ModelParams, Segment};
pub use tensor::Tensor;
