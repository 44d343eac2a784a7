//! Dense tensors, a dynamic reverse-mode tape, and Adam.
//!
//! Everything computes in `f64`. Broadcasting is limited to scalar operands
//! plus the explicit [`Graph::add_row_vector`] used for biases.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState, ParamStore};
pub use graph::{
    gelu, gelu_grad, log_mean_exp, Elementwise, Gradients, Graph, OpKind, Var, ALL_OPS,
    LAYER_NORM_EPS,
};
pub use tensor::Tensor;

pub(crate) use tensor::matmul_raw;
