//! Dense matrices, reverse-mode differentiation and finite-difference checking.

mod gradcheck;
mod matrix;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, relative_error, CoordError, GradCheckConfig, GradCheckReport};
pub use matrix::{dot, Matrix};
pub use ops::{cross_entropy, log_add, log_softmax_rows, log_sum_exp, sigmoid, softmax_rows};
pub use tape::{Gradients, NodeId, ParamId, ParamStore, Parameter, Tape, LAYER_NORM_EPS};
