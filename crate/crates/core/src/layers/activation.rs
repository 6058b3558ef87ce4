use super::{Activation, Ctx, Layer};
use crate::{Error, Result, Scalar, Tensor};

#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(sigmoid_scalar)
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            _ if x.is_nan() => x,
            Activation::Relu => x.max(S::zero()),
            Activation::Relu6 => x.max(S::zero()).min(S::lit(6.0)),
            Activation::Silu => x * sigmoid_scalar(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at `x`, taking 0 on the flat side of every kink.
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Relu6 => {
                if x > S::zero() && x < S::lit(6.0) {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid_scalar(x);
                s * (S::one() + x * (S::one() - s))
            }
            Activation::Identity => S::one(),
        }
    }
}

/// Elementwise hidden activation layer.
#[derive(Debug, Clone)]
pub struct Act<S> {
    pub kind: Activation,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Act<S> {
    pub fn new(kind: Activation) -> Self {
        Self {
            kind,
            cached_input: None,
        }
    }
}

impl<S: Scalar> Layer<S> for Act<S> {
    fn forward(&mut self, x: &Tensor<S>, _ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let kind = self.kind;
        let y = x.map(|v| kind.apply(v));
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self
            .cached_input
            .take()
            .ok_or(Error::BackwardBeforeForward("activation"))?;
        let kind = self.kind;
        grad.zip_map(&x, "activation backward", |g, v| g * kind.derivative(v))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<S> {
    cached_output: Option<Tensor<S>>,
}

impl<S: Scalar> Sigmoid<S> {
    pub fn new() -> Self {
        Self { cached_output: None }
    }
}

impl<S: Scalar> Layer<S> for Sigmoid<S> {
    fn forward(&mut self, x: &Tensor<S>, _ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let y = sigmoid(x);
        self.cached_output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self
            .cached_output
            .take()
            .ok_or(Error::BackwardBeforeForward("sigmoid"))?;
        grad.zip_map(&y, "sigmoid backward", |g, s| g * s * (S::one() - s))
    }
}
