//! A small reverse-mode automatic differentiation engine over 4-D NCHW
//! tensors: just enough operators for residual U-Nets with instance-style
//! normalization, trained on a CPU.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{ChannelMlpVars, Gradients, Graph, Var, PROB_EPS};
pub use kernels::Pooling;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
