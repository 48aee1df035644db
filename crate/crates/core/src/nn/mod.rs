//! Trainable building blocks over `candle` tensors.

mod layers;
mod params;

pub use layers::{
    avg_pool, global_avg_pool, log_sum_exp_last, scalar_zero, sigmoid, softmax_last,
    upsample_nearest2x, ChannelLayerNorm, Conv2d, GroupNorm, Linear,
};
pub use params::{read_metadata, Init, ParamStore};
