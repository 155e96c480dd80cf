//! Dense tensors, a reverse-mode gradient tape and a finite-difference checker.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use scalar::Scalar;
pub use tape::{logsumexp, sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;
