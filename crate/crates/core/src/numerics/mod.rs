//! Dense tensors, reverse-mode gradients and the Adam optimizer.

mod gradcheck;
mod graph;
pub mod layers;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, Var};
pub use ops::{rmsnorm, silu, softmax, swiglu_expert, topk_indices, RMSNORM_EPS};
pub use optim::{adam_step, OptimizerState};
pub use params::ParamStore;
pub use tensor::Tensor;
