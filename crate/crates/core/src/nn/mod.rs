//! Neural layers on top of [`crate::autodiff`].

mod layers;
mod params;

pub use layers::{
    encoder_frames, linear_softmax_ce, Conv1d, ConvBlock, ConvBlockConfig, Decoder, Encoder,
    GlobalLayerNorm, Prelu, GLN_EPS, PRELU_INIT,
};
pub use params::{check_param_gradients, Bound, Init, ParamId, ParamStore};
