use super::{Ctx, Layer, Mode};
use crate::{Error, Result, Rng, Scalar, Tensor};

/// Inverted dropout: in training, each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Returns the output and
/// the per-element multiplier that was applied (`None` when the pass was an
/// identity).
pub fn dropout_forward<S: Scalar>(
    input: &Tensor<S>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Option<Vec<S>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = S::lit(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..input.len())
        .map(|_| if rng.bernoulli(rate) { S::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::from_vec(input.shape(), data)?, Some(mask)))
}

#[derive(Debug, Clone)]
pub struct Dropout<S> {
    pub rate: f64,
    cache: Option<Option<Vec<S>>>,
}

impl<S: Scalar> Dropout<S> {
    pub fn new(rate: f64) -> Self {
        Self { rate, cache: None }
    }
}

impl<S: Scalar> Layer<S> for Dropout<S> {
    fn forward(&mut self, x: &Tensor<S>, ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let (y, mask) = dropout_forward(x, self.rate, ctx.mode, ctx.rng)?;
        self.cache = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        match self.cache.take().ok_or(Error::BackwardBeforeForward("dropout"))? {
            None => Ok(grad.clone()),
            Some(mask) => {
                let data = grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                Tensor::from_vec(grad.shape(), data)
            }
        }
    }
}
