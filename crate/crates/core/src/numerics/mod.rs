//! Differentiable computation substrate and small numeric utilities.

mod grad_check;
mod graph;
mod linalg;
mod optim;
mod tensor;
pub mod tensor_io;

pub use grad_check::{
    compare_gradients, finite_diff_grad, finite_diff_param, relative_error, GradCheckReport,
    DEFAULT_FD_EPS, DEFAULT_REL_FLOOR,
};
pub use graph::{
    sigmoid, softmax_in_place, Axis, Gradients, Graph, NodeId, ParamId, ParamStore, COSINE_CLAMP,
    LAYER_NORM_EPS, LOG_CLAMP,
};
pub use linalg::{pca_project, pearson_r, Pca};
pub use optim::{adam_step, AdamConfig, OptimState};
pub use tensor::Tensor;
