//! Dense `f64` tensors, a reverse-mode tape, dense layers, losses, and Adam.

mod layers;
mod loss;
mod optim;
mod tape;
mod tensor;

pub use layers::{Activation, Linear, Mlp, ParamMode};
pub use loss::weighted_cross_entropy;
pub use optim::{adam_step, Adam, Parameter};
pub use tape::{softmax, softmax_rows, Gradients, Graph, Var};
pub use tensor::Tensor;
