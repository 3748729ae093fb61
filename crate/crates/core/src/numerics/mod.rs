//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_leaves, check_params, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{AttnMask, FrozenTape, Gradients, Graph, Span, StoreRef, Var};
#[allow(unused_imports)]
pub(crate) use graph::{argmax, dot, log_sum_exp_and_probs, matmul_raw, softmax_row};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

