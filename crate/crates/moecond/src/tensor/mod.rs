//! Minimal dense linear algebra with reverse-mode differentiation.

mod grad_check;
mod matrix;
mod tape;

pub use grad_check::{grad_check, GradCheckReport};
pub use matrix::{logistic, silu, silu_prime, softmax, Matrix};
pub use tape::{softmax_vjp, BackwardCtx, CustomBackward, NodeId, Tape, TapeGrads};
