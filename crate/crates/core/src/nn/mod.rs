//! Minimal numerical kernel: dense matrices, the transformer encoder layer,
//! its hand-written gradients, AdamW and a finite-difference oracle.

mod attention;
pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use encoder::{
    encoder_layer_backward, encoder_layer_forward, encoder_layer_forward_traced,
    multi_head_self_attention, LayerParams, LayerTrace, ParamBuffers,
};
pub use gradcheck::{compare_gradients, finite_difference_gradient, GradCheckReport};
pub use ops::{fast_exp, gelu, layer_norm, softmax, LAYER_NORM_EPS};
pub use optim::{adamw_step, GradientSet, LrSchedule, OptimizerState};
pub use tensor::{axpy, dot, matmul, Tensor2D};
