//! Network building blocks, each with its forward and adjoint rule.

mod batchnorm;
mod conv;
mod dropout;
mod pool;
mod softmax;

pub use batchnorm::{
    batchnorm_eval, batchnorm_train, channel_stats, BatchNormState, ChannelStats, NormMode,
    EPSILON as BN_EPSILON, MOMENTUM as BN_MOMENTUM,
};
pub use conv::{conv2d, ConvSpec, KERNEL};
pub use dropout::{apply_mask, draw_mask, dropout, Mode};
pub use pool::{maxpool2x2, maxunpool2x2, PoolIndices};
pub use softmax::{softmax, softmax_tensor, weighted_cross_entropy, LOG_CLAMP};
