//! Dense tensors, a reverse-mode tape, and finite-difference gradient checks.

mod grad_check;
mod graph;
mod interp;
mod params;
mod tensor;

pub use grad_check::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub(crate) use graph::softplus;
pub use interp::{bilinear_1d, upsample_matrix};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{masked_softmax, matmul, matmul_t, softmax, Tensor};
