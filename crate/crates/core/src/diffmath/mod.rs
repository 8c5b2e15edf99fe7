//! Dense f64 tensors with reverse-mode differentiation, gradient checking and
//! the Adam optimizer.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
pub use gradcheck::grad_check;
pub use tape::{with_gradient_fault, OpKind, Tape, Var, KL_CLAMP, PROB_SUM_TOL};
pub use tensor::Tensor;
