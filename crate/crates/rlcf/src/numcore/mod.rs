//! Dense vector/matrix math with exact gradients for the small model family
//! used by the rest of the crate.
//!
//! Values are 64-bit throughout; checkpoints store 32-bit (see
//! [`crate::checkpoint`]). All operations here are pure functions of their
//! inputs and safe to share read-only across threads.

mod ops;
mod tape;
mod tensor;
mod tree;

pub use ops::{argmax, cosine, dot, entropy, l2_normalize, log_softmax, mean, norm, softmax};
pub use tape::{eval, finite_diff, grad, max_relative_error, Tape, TreeVars, Val};
pub use tensor::Tensor2;
pub use tree::{GradTree, ParamBlock, ParamTree};
