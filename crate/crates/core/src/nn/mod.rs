//! Neural-network primitives: convolution, dense layers, normalization,
//! activations and pooling, plus parameter-owning layer wrappers.

mod activation;
mod conv;
mod layers;
mod linear;
mod norm;
mod pool;

pub use activation::{gelu, softmax_lastdim};
pub use conv::{conv2d, depthwise_conv3x3, Conv2dParams};
pub use layers::{Conv2d, Initializer, LayerNorm, Linear, Module};
pub use linear::linear;
pub use norm::{layer_norm, LAYER_NORM_EPS};
pub use pool::{adaptive_avg_pool, pool_bin};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `[n, h·w, c]` token sequence to a `[n, c, h, w]` feature map.
pub fn tokens_to_map<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, t, c] = *x.shape() else {
        return Err(Error::shape(format!("tokens must be [n,t,c], got {:?}", x.shape())));
    };
    if t != h * w {
        return Err(Error::shape(format!("{t} tokens do not form a {h}x{w} map")));
    }
    x.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])
}

/// `[n, c, h, w]` feature map to a `[n, h·w, c]` token sequence.
pub fn map_to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::shape(format!(
            "feature map must be [n,c,h,w], got {:?}",
            x.shape()
        )));
    };
    x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])
}
