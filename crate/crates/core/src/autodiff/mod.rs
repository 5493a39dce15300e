//! Dense tensors, a reverse-mode tape, and AdamW.

mod optim;
mod tape;
mod tensor;

pub use optim::AdamW;
pub use tape::{Gradients, Param, ParamId, Tape, Var, LAYERNORM_EPS};
pub use tensor::{Scalar, Tensor};
