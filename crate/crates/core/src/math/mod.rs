//! Dense tensors, reverse-mode differentiation and optimization.

pub mod fd;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, LrSchedule};
pub use params::{Param, ParamId, ParamSet};
pub use tensor::Tensor;
