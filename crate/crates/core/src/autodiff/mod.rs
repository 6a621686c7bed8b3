//! Dense tensors and reverse-mode automatic differentiation.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, MASK_BLOCKED};
pub use tensor::{Result, Tensor, TensorError};
