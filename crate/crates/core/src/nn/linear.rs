use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-token affine map: `x [..., c_in] · weight [c_in, c_out] + bias [c_out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let c_in = *x.shape().last().expect("rank >= 1");
    let [w_in, c_out] = weight.shape() else {
        return Err(Error::shape(format!(
            "linear weight must be 2-D, got {:?}",
            weight.shape()
        )));
    };
    if *w_in != c_in {
        return Err(Error::shape(format!(
            "linear: input width {c_in} vs weight {:?}",
            weight.shape()
        )));
    }
    let rows = x.len() / c_in;
    let mut y = x.reshape(&[rows, c_in])?.matmul(weight)?;
    if let Some(b) = bias {
        y = y.add_bias(b)?;
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = *c_out;
    y.reshape(&shape)
}
