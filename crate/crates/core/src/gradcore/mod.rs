//! Dense `f64` tensors, a reverse-mode tape and two optimizers.

mod optim;
mod param;
mod tape;
mod tensor;


pub use optim::{Optimizer, OptimizerKind};
pub use param::{Module, ParamId, ParamSet, Parameter};
pub use tape::{softmax_rows, Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
