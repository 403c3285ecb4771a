use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{conv2d, layer_norm, linear, Conv2dParams, LAYER_NORM_EPS};
use crate::error::Result;
use crate::macs;
use crate::tensor::{Scalar, Tensor};

/// Anything that owns named parameter tensors.
///
/// Visiting order is construction order and is the order used for weight
/// files.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t| n += t.len() as u64);
        n
    }
}

/// Seeded parameter initialization: weights from normal(0, 0.02), biases
/// zero, norm scales one.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub const DEFAULT_STD: f64 = 0.02;

    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: Self::DEFAULT_STD,
        }
    }

    pub fn with_std(seed: u64, std: f64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::rand_normal(shape, &mut self.rng, 0.0, self.std)
    }
}

#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, init: &mut Initializer) -> Result<Self> {
        Ok(Linear {
            name: name.into(),
            weight: init.weight(&[c_in, c_out])?,
            bias: Tensor::zeros(&[c_out])?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        macs::scope(&self.name, || linear(x, &self.weight, Some(&self.bias)))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    pub name: String,
    pub params: Conv2dParams,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: impl Into<String>, params: Conv2dParams, init: &mut Initializer) -> Result<Self> {
        params.validate()?;
        Ok(Conv2d {
            name: name.into(),
            params,
            weight: init.weight(&params.weight_shape())?,
            bias: Tensor::zeros(&[params.out_channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        macs::scope(&self.name, || conv2d(x, &self.weight, Some(&self.bias), &self.params))
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

#[derive(Clone)]
pub struct LayerNorm<T: Scalar> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            name: name.into(),
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.weight", self.name), &self.gamma);
        f(&format!("{}.bias", self.name), &self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.weight", self.name), &mut self.gamma);
        f(&format!("{}.bias", self.name), &mut self.beta);
    }
}
