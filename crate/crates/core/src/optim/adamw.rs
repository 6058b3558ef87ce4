use serde::{Deserialize, Serialize};

use crate::layers::Parameter;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Skip decay on parameters flagged as non-decaying (batchnorm affine
    /// terms and biases).
    pub exclude_norm_and_bias: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            exclude_norm_and_bias: true,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamWState<S> {
    pub fn zeros_for(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }
}

/// One AdamW update of a flat parameter slice at step `t` (already incremented):
///
/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `θ ← θ − α·m̂/(√v̂ + ε) − α·λ·θ` with bias-corrected `m̂`, `v̂`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<S: Scalar>(
    theta: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let one = S::one();
    let bc1 = S::lit(1.0 - cfg.beta1.powf(t as f64));
    let bc2 = S::lit(1.0 - cfg.beta2.powf(t as f64));
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);
    let wd = if decay { S::lit(cfg.weight_decay) } else { S::zero() };
    let lr_wd = lr * wd;
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let old = theta[i];
        theta[i] = old - lr * (m_hat / (v_hat.sqrt() + eps)) - lr_wd * old;
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub state: AdamWState<S>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &[&Parameter<S>]) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.value.shape()).collect();
        Ok(Self {
            config,
            state: AdamWState::zeros_for(&shapes),
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn zero_grad(&self, params: &mut [&mut Parameter<S>]) {
        for p in params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter<S>]) -> Result<()> {
        if params.len() != self.state.m.len() {
            return Err(Error::InvalidShape(format!(
                "optimizer tracks {} tensors, got {}",
                self.state.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.state.m) {
            if p.value.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw step",
                    expected: m.shape().to_vec(),
                    got: p.value.shape().to_vec(),
                });
            }
        }
        self.state.t += 1;
        let t = self.state.t;
        for ((p, m), v) in params.iter_mut().zip(&mut self.state.m).zip(&mut self.state.v) {
            let decay = p.decay || !self.config.exclude_norm_and_bias;
            let Parameter { value, grad, .. } = &mut **p;
            adamw_update(value.data_mut(), grad.data(), m.data_mut(), v.data_mut(), t, &self.config, decay);
        }
        Ok(())
    }
}
