//! Minimal reverse-mode layer toolkit backing the networks.

mod adam;
mod layers;

pub use adam::{Adam, AdamConfig};
pub(crate) use layers::join;
pub use layers::{
    softmax_backward, softmax_channels, Conv2d, ConvTranspose2d, Dropout, ForwardCtx, HasParams,
    InstanceNorm, Layer, Param, Relu, ResidualBlock, Sequential, Tanh,
};
