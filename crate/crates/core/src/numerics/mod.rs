//! Dense f64 tensors, a tape-based reverse-mode autodiff, the layers built
//! on it, Adam, and the finite-difference oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, param_grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use tensor::Tensor;
