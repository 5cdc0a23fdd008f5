//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use tape::{gelu, Gradients, Tape, Var, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
