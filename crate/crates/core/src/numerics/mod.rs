//! Dense tensors, a reverse-mode tape and finite-difference checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{sigmoid, softplus, CustomOp, Tape, Unary, Var};
pub use tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
