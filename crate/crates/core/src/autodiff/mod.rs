//! Reverse-mode differentiation core: tensors, tape, parameters, Adam,
//! finite-difference checking and checkpoint files.

mod adam;
pub mod checkpoint;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_extended, LossFn, relative_error, GradCheckReport, ParamCheck};
pub use params::ParamStore;
pub use tape::{softmax_rows, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
