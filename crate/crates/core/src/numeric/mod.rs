//! Dense tensors, a reverse-mode tape, layers, SGD and gradient checking.

pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Graph, Var, LAYER_NORM_EPS, PROB_EPS};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
