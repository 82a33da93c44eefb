//! Dense tensors, reverse-mode gradients, finite-difference checking and the
//! binary tensor format.

mod codec;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use codec::{encode_tensor, read_tensor, write_tensor, Precision};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradReport, REL_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use params::{uniform_fan_in, ParamId, ParamStore};
pub use tensor::Tensor;
