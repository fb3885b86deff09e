//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod conv;
mod gemm;
mod tape;
mod tensor;

pub use conv::Conv3dSpec;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
