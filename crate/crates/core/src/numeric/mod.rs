//! Dense tensors, layer primitives and reverse-mode differentiation.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use ops::{argmax, conv2d, softmax, ConvGeometry};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
