//! Reverse-mode automatic differentiation over dense tensors, plus the
//! NTSR1 weight container. Everything trainable in this crate runs on
//! [`Tape`].

pub mod ntsr;
mod tape;
mod tensor;

pub use tape::{gram_matrix, NodeId, Tape};
pub use tensor::Tensor;
