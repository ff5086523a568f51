//! Differentiable layer kernels: each operation has a forward pass and a
//! hand-written backward pass, checked against central finite differences.

pub mod act;
pub mod conv;
pub mod convlstm;
pub mod norm;
pub mod pool;
pub mod temporal;

pub use act::{
    scaled_tanh, selu, selu_backward_map, selu_grad, selu_map, sigmoid, sigmoid_map,
    SELU_ALPHA, SELU_LAMBDA, TANH_SCALE, TANH_SLOPE,
};
pub use conv::{conv_freq, conv_freq_backward};
pub use convlstm::{
    convlstm_step, convlstm_step_backward, convlstm_step_train, ConvLstmCache, ConvLstmOpts,
    ConvLstmParams, ConvLstmState, LnAffine,
};
pub use norm::{layer_norm_frame, layer_norm_frame_backward, LayerNormCache, LN_EPS};
pub use pool::{avg_pool_freq, avg_pool_freq_backward};
pub use temporal::{
    causal_conv_time, causal_conv_time_backward, upsample_time, upsample_time_backward,
};
