//! Numerical primitives: dense matrices, normalizations, the SwiGLU FFN,
//! softmax, differentiable operators with gradient checking, and the FLOP
//! execution trace.

pub mod ffn;
pub mod init;
pub mod matrix;
pub mod norm;
pub mod op;
pub mod softmax;
pub mod trace;

pub use ffn::{ffn_backward, ffn_forward, sigmoid, swiglu_ffn, swish, FfnCache, FfnParams};
pub use init::{seeded_rng, xavier_uniform, ModelRng};
pub use matrix::{gemm, Matrix};
pub use norm::{layer_norm, norm_rows_backward, norm_rows_forward, rms_norm, NormCache, NormKind, NormParams};
pub use op::{grad_check, grad_check_scalar, DifferentiableOp, GradCheckReport};
pub use softmax::{softmax, softmax_backward};
