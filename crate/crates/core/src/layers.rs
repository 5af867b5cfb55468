//! Small parameterised building blocks shared by the encoder, the attention
//! layers and the network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{s, Scalar};
use crate::tensor::{Result, Tensor};

/// Visitor over named parameter tensors. Names are stable across builds and
/// are what checkpoints store.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` weights.
pub(crate) fn uniform_fan_in<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| s(rng.gen_range(-bound..bound))).collect();
    Tensor::param(shape, data).unwrap()
}

pub(crate) fn filled<T: Scalar>(shape: &[usize], v: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![s(v); n]).unwrap()
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: uniform_fan_in(rng, &[fan_in, fan_out], fan_in),
            bias: bias.then(|| filled(&[fan_out], 0.0)),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: filled(&[fan_in, fan_out], 0.0),
            bias: bias.then(|| filled(&[fan_out], 0.0)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x · W + b` over the last axis of a `[rows, in]` input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: filled(&[dim], 1.0),
            bias: filled(&[dim], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, s(self.eps))
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
