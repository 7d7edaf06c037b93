//! Tensors, RNG, kernels, and the differentiation tape.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradReport, WorstEntry};
pub use rng::Rng;
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::Tensor;
