//! Dense row-major matrices and the handful of kernels the encoder needs,
//! each with an explicit backward.
//!
//! Storage is generic over [`Scalar`]: `f32` for models and training, `f64`
//! for gradient verification.

mod matrix;
mod ops;
pub mod gradcheck;

pub use gradcheck::{grad_check, grad_check_with_inputs, relative_error, GradCheckOutcome, Kernel};
pub use matrix::{GradPair, Matrix, Scalar};
pub use ops::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul,
    matmul_backward, softmax_rows, softmax_rows_backward, LayerNormCache, MASK_NEG,
};
