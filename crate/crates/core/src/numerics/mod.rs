//! Dense f64 tensors, a reverse-mode tape, finite-difference checking and
//! the optimiser used by both training stages.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, grad_check, relative_error, GradCheckReport, REL_FLOOR};
pub use optim::{clip_global_norm, Adam};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_softmax, matmul, mse, softmax, softmax_cross_entropy, Tensor};
pub use tensor::log_sum_exp;
