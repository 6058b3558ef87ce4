//! Primitive layers with hand-written reverse-mode rules.
//!
//! Every layer records what its backward rule needs during `forward` and
//! consumes that record in `backward`. Parameter gradients accumulate into
//! [`Parameter::grad`] until the optimizer clears them.

mod activation;
mod batchnorm;
mod conv;
mod dropout;
pub(crate) mod gemm;
mod linear;
mod pool;

use serde::{Deserialize, Serialize};

pub use activation::{sigmoid, sigmoid_scalar, Act, Sigmoid};
pub use batchnorm::{batchnorm2d_forward, BatchNorm2d};
pub use conv::{conv2d_backward, conv2d_forward, conv_out_extent, Conv2d, ConvGeometry};
pub use dropout::{dropout_forward, Dropout};
pub use linear::{linear_forward, Linear};
pub use pool::{adaptive_avg_pool2d, adaptive_bins, maxpool2d_forward, AdaptiveAvgPool2d, MaxPool2d};

use crate::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call context threaded through every forward pass.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

impl<'a> Ctx<'a> {
    pub fn new(mode: Mode, rng: &'a mut Rng) -> Self {
        Self { mode, rng }
    }
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
    Silu,
    Identity,
}

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Whether decoupled weight decay may touch this tensor.
    pub decay: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, decay: bool) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn accumulate(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// A differentiable map from one tensor to another.
pub trait Layer<S: Scalar> {
    fn forward(&mut self, x: &Tensor<S>, ctx: &mut Ctx<'_>) -> crate::Result<Tensor<S>>;

    /// Maps the upstream gradient to the input gradient, accumulating
    /// parameter gradients along the way.
    fn backward(&mut self, grad: &Tensor<S>) -> crate::Result<Tensor<S>>;

    fn params(&self) -> Vec<&Parameter<S>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        Vec::new()
    }
}

/// Kaiming-uniform weights for a fan-in, gain sqrt(2): U(-b, b), b = sqrt(6 / fan_in).
pub(crate) fn kaiming_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| S::lit(rng.uniform(-bound, bound))).collect();
    Tensor::from_vec(shape, data).expect("shape/len agree")
}

pub(crate) fn join_name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
