use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{join_name, kaiming_uniform, Ctx, Layer, Parameter};
use crate::{Error, Result, Rng, Scalar, Tensor};

/// `input[N, Din] · weight[Dout, Din]ᵀ + bias[Dout]`
pub fn linear_forward<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, din) = input.dims2("linear input")?;
    let (dout, wdin) = weight.dims2("linear weight")?;
    if din != wdin || bias.shape() != [dout] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            expected: vec![dout, din],
            got: weight.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, dout]);
    for row in out.data_mut().chunks_mut(dout) {
        row.copy_from_slice(bias.data());
    }
    gemm_nt(n, din, dout, input.data(), weight.data(), out.data_mut());
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let w = kaiming_uniform(&[out_features, in_features], in_features, rng);
        Self {
            weight: Parameter::new(join_name(name, "weight"), w, true),
            bias: Parameter::new(join_name(name, "bias"), Tensor::zeros(&[out_features]), false),
            cached_input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl<S: Scalar> Layer<S> for Linear<S> {
    fn forward(&mut self, x: &Tensor<S>, _ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let y = linear_forward(x, &self.weight.value, &self.bias.value)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self
            .cached_input
            .take()
            .ok_or(Error::BackwardBeforeForward("linear"))?;
        let (n, din) = x.dims2("linear")?;
        let dout = self.bias.numel();
        if grad.shape() != [n, dout] {
            return Err(Error::ShapeMismatch {
                op: "linear backward",
                expected: vec![n, dout],
                got: grad.shape().to_vec(),
            });
        }
        let mut dw = vec![S::zero(); dout * din];
        gemm_tn(dout, n, din, grad.data(), x.data(), &mut dw);
        self.weight.accumulate(&dw);
        let mut db = vec![S::zero(); dout];
        for row in grad.data().chunks(dout) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        self.bias.accumulate(&db);
        let mut dx = Tensor::zeros(&[n, din]);
        gemm_nn(n, dout, din, grad.data(), self.weight.value.data(), dx.data_mut());
        Ok(dx)
    }

    fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
