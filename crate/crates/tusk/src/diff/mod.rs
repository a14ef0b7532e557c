//! Differentiable computation: a fixed operator set over dense tensors with
//! reverse-mode gradients, plus a finite-difference verification harness.

mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var, WarpGrid};
pub use tensor::{Dtype, Scalar, Tensor};


/// Names of the provided differentiable operators. Every entry has a forward
/// and a gradient, and the gradient-check suite iterates this list.
pub fn op_set() -> &'static [&'static str] {
    &[
        "conv2d_s1",
        "conv2d_s2",
        "upsample2x_conv",
        "leaky_relu",
        "sigmoid",
        "softmax_axis",
        "add",
        "sub",
        "mul",
        "mul_scalar",
        "scale",
        "sum_all",
        "mean_all",
        "l2_norm",
        "matmul",
        "bilinear_sample",
        "gaussian_conv",
        "sort_cols",
        "concat_last",
        "gather_rows",
        "pairwise_l2",
        "row_min",
        "row_logsumexp",
        "soft_argmax",
        "gather_pixels",
        "splat",
        "weighted_sum_k",
        "index_k",
        "stack0",
        "slice_last",
        "squeeze_last",
        "expand_last",
        "sum_axis0",
        "warp",
        "masked_mse",
    ]
}
