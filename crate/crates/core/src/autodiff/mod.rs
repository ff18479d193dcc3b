//! Dense tensors and a reverse-mode tape covering exactly the operations the
//! toy transformer and the attack objective need.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, relative_error, GradCheckConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

