//! Dense tensors and a reverse-mode gradient tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{ElemOp, Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
