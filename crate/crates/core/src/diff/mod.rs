//! Reverse-mode differentiable tensors plus the dense linear algebra and
//! optimizer the model is trained with.

mod adam;
mod gradcheck;
mod linalg;
mod params;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{analytic_gradients, compare_with_finite_differences, grad_check, GradCheckReport};
pub use linalg::{Matrix, Triangle};
pub use params::{BoundParams, ParamArray, ParamGrads, ParamStore};
pub use tensor::{GradMap, Graph, NodeId, Tensor};

