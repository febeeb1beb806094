//! Reverse-mode automatic differentiation over dense `f64` arrays, plus Adam.
//!
//! Broadcasting is limited to adding a row vector to every row of a matrix.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, Parameters};
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
