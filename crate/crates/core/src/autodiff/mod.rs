//! Dense tensors and a reverse-mode tape.
//!
//! The primitive set is closed: elementwise add/mul/scale, relu, exp, log,
//! sum/mean reductions (global or along one axis), last-axis softmax,
//! reshape, batched matmul, multi-channel 1-D convolution and pairwise
//! cosine similarity. Everything in the model and the losses is composed
//! from these, so [`grad_check`] over each primitive covers the whole stack.
//!
//! Only first-order gradients are supported.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
