//! Tensor storage, the recording tape and finite-difference checking.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
