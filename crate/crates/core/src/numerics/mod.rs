//! Dense tensors and a tape-based reverse-mode differentiator.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
