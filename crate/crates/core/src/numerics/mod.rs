//! Dense tensors, a reverse-mode tape, and the seeded random source.

mod prng;
mod scalar;
mod tape;
mod tensor;

pub use prng::Prng;
pub use scalar::Scalar;
pub use tape::{BinaryOp, CustomOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;
