//! Inverted residual block with a parallel depthwise sigmoid gate.
//!
//! Data flow for input `x`:
//!
//! ```text
//! u    = act(bn(expand_1x1(x)))
//! v    = act(bn(depthwise_3x3_stride(u)))
//! gate = sigmoid(depthwise_3x3(v))          (stride 1, with bias, no norm)
//! g    = v * gate                           (g = v when the gate is disabled)
//! y    = bn(project_1x1(g))                 (linear bottleneck)
//! out  = y + x   if stride == 1 and in == out channels, else y
//! ```

use serde::{Deserialize, Serialize};

use crate::layers::{join_name, Act, Activation, BatchNorm2d, Conv2d, Ctx, Layer, Parameter, Sigmoid};
use crate::{Error, Result, Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expansion_factor: usize,
    pub use_gate: bool,
    pub use_batchnorm: bool,
    pub activation: Activation,
}

impl MambaBlockConfig {
    pub fn hidden(&self) -> usize {
        self.in_channels * self.expansion_factor
    }

    pub fn residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    /// Scalars held by the gate conv: a 3x3 depthwise kernel plus bias per hidden channel.
    pub fn gate_param_count(&self) -> usize {
        if self.use_gate {
            10 * self.hidden()
        } else {
            0
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.expansion_factor == 0 {
            return Err(Error::InvalidConfig("block widths and expansion must be positive".into()));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::InvalidConfig(format!("block stride {} not in {{1, 2}}", self.stride)));
        }
        Ok(())
    }
}

/// Intermediate tensors of the most recent forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace<S> {
    /// Main depthwise branch output, the gate's input.
    pub pre_gate: Tensor<S>,
    pub gate: Option<Tensor<S>>,
}

impl<S: Scalar> BlockTrace<S> {
    pub fn gated(&self) -> Result<Tensor<S>> {
        match &self.gate {
            Some(g) => self.pre_gate.mul(g),
            None => Ok(self.pre_gate.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MambaBlock<S> {
    pub config: MambaBlockConfig,
    pub expand: Conv2d<S>,
    pub expand_bn: Option<BatchNorm2d<S>>,
    expand_act: Act<S>,
    pub depthwise: Conv2d<S>,
    pub depthwise_bn: Option<BatchNorm2d<S>>,
    depthwise_act: Act<S>,
    pub gate: Option<Conv2d<S>>,
    gate_sigmoid: Sigmoid<S>,
    pub project: Conv2d<S>,
    pub project_bn: Option<BatchNorm2d<S>>,
    trace: Option<BlockTrace<S>>,
}

impl<S: Scalar> MambaBlock<S> {
    /// Draws main-path weights first and the gate last, so a gated and an
    /// ungated block built from equal streams share every other weight.
    pub fn new(name: &str, config: MambaBlockConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let hidden = config.hidden();
        let bn = config.use_batchnorm;
        let n = |leaf: &str| join_name(name, leaf);
        let expand = Conv2d::new(&n("expand"), config.in_channels, hidden, 1, 1, 0, 1, !bn, rng)?;
        let depthwise = Conv2d::new(&n("depthwise"), hidden, hidden, 3, config.stride, 1, hidden, !bn, rng)?;
        let project = Conv2d::new(&n("project"), hidden, config.out_channels, 1, 1, 0, 1, !bn, rng)?;
        let gate = if config.use_gate {
            Some(Conv2d::new(&n("gate"), hidden, hidden, 3, 1, 1, hidden, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            expand,
            expand_bn: bn.then(|| BatchNorm2d::new(&n("expand_bn"), hidden)),
            expand_act: Act::new(config.activation),
            depthwise,
            depthwise_bn: bn.then(|| BatchNorm2d::new(&n("depthwise_bn"), hidden)),
            depthwise_act: Act::new(config.activation),
            gate,
            gate_sigmoid: Sigmoid::new(),
            project,
            project_bn: bn.then(|| BatchNorm2d::new(&n("project_bn"), config.out_channels)),
            trace: None,
        })
    }

    pub fn trace(&self) -> Option<&BlockTrace<S>> {
        self.trace.as_ref()
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm2d<S>> {
        [&self.expand_bn, &self.depthwise_bn, &self.project_bn]
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<S>> {
        [&mut self.expand_bn, &mut self.depthwise_bn, &mut self.project_bn]
            .into_iter()
            .flatten()
            .collect()
    }
}

fn bn_forward<S: Scalar>(bn: &mut Option<BatchNorm2d<S>>, x: Tensor<S>, ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
    match bn {
        Some(bn) => bn.forward(&x, ctx),
        None => Ok(x),
    }
}

fn bn_backward<S: Scalar>(bn: &mut Option<BatchNorm2d<S>>, g: Tensor<S>) -> Result<Tensor<S>> {
    match bn {
        Some(bn) => bn.backward(&g),
        None => Ok(g),
    }
}

impl<S: Scalar> Layer<S> for MambaBlock<S> {
    fn forward(&mut self, x: &Tensor<S>, ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let (_, c, _, _) = x.dims4("mamba block")?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "mamba block",
                expected: vec![self.config.in_channels],
                got: vec![c],
            });
        }
        let u = self.expand.forward(x, ctx)?;
        let u = bn_forward(&mut self.expand_bn, u, ctx)?;
        let u = self.expand_act.forward(&u, ctx)?;

        let v = self.depthwise.forward(&u, ctx)?;
        let v = bn_forward(&mut self.depthwise_bn, v, ctx)?;
        let v = self.depthwise_act.forward(&v, ctx)?;

        let (g, gate) = match &mut self.gate {
            Some(conv) => {
                let z = conv.forward(&v, ctx)?;
                let gate = self.gate_sigmoid.forward(&z, ctx)?;
                (v.mul(&gate)?, Some(gate))
            }
            None => (v.clone(), None),
        };
        self.trace = Some(BlockTrace { pre_gate: v, gate });

        let y = self.project.forward(&g, ctx)?;
        let mut y = bn_forward(&mut self.project_bn, y, ctx)?;
        if self.config.residual() {
            y.add_assign(x)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let trace = self
            .trace
            .take()
            .ok_or(Error::BackwardBeforeForward("mamba block"))?;
        let dy = bn_backward(&mut self.project_bn, grad.clone())?;
        let dg = self.project.backward(&dy)?;

        let dv = match (&mut self.gate, &trace.gate) {
            (Some(conv), Some(gate)) => {
                // product rule at g = v * gate
                let mut dv = dg.mul(gate)?;
                let dgate = dg.mul(&trace.pre_gate)?;
                let dz = self.gate_sigmoid.backward(&dgate)?;
                dv.add_assign(&conv.backward(&dz)?)?;
                dv
            }
            _ => dg,
        };
        let dv = self.depthwise_act.backward(&dv)?;
        let dv = bn_backward(&mut self.depthwise_bn, dv)?;
        let du = self.depthwise.backward(&dv)?;
        let du = self.expand_act.backward(&du)?;
        let du = bn_backward(&mut self.expand_bn, du)?;
        let mut dx = self.expand.backward(&du)?;
        if self.config.residual() {
            dx.add_assign(grad)?;
        }
        Ok(dx)
    }

    /// Order: expand, expand_bn, depthwise, depthwise_bn, gate, project, project_bn.
    fn params(&self) -> Vec<&Parameter<S>> {
        let mut v = self.expand.params();
        if let Some(bn) = &self.expand_bn {
            v.extend(bn.params());
        }
        v.extend(self.depthwise.params());
        if let Some(bn) = &self.depthwise_bn {
            v.extend(bn.params());
        }
        if let Some(g) = &self.gate {
            v.extend(g.params());
        }
        v.extend(self.project.params());
        if let Some(bn) = &self.project_bn {
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = self.expand.params_mut();
        if let Some(bn) = &mut self.expand_bn {
            v.extend(bn.params_mut());
        }
        v.extend(self.depthwise.params_mut());
        if let Some(bn) = &mut self.depthwise_bn {
            v.extend(bn.params_mut());
        }
        if let Some(g) = &mut self.gate {
            v.extend(g.params_mut());
        }
        v.extend(self.project.params_mut());
        if let Some(bn) = &mut self.project_bn {
            v.extend(bn.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn cfg(cin: usize, cout: usize, stride: usize, gate: bool) -> MambaBlockConfig {
        MambaBlockConfig {
            in_channels: cin,
            out_channels: cout,
            stride,
            expansion_factor: 2,
            use_gate: gate,
            use_batchnorm: true,
            activation: Activation::Relu,
        }
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_projection_passes_input_through() {
        let mut rng = Rng::new(1);
        let mut b = MambaBlock::<f64>::new("b", MambaBlockConfig { expansion_factor: 4, ..cfg(8, 8, 1, true) }, &mut rng).unwrap();
        b.project.weight.value.fill(0.0);
        let x = random(&[2, 8, 6, 6], &mut rng);
        let mut ctx = Ctx::new(Mode::Train, &mut rng);
        let y = b.forward(&x, &mut ctx).unwrap();
        assert_eq!(y, x);
        let up = random(&[2, 8, 6, 6], &mut rng);
        let dx = b.backward(&up).unwrap();
        assert_eq!(dx, up);
    }

    #[test]
    fn downsampling_shape() {
        let mut rng = Rng::new(2);
        let mut b = MambaBlock::<f32>::new("b", MambaBlockConfig { expansion_factor: 1, ..cfg(64, 128, 2, true) }, &mut rng).unwrap();
        assert!(!b.config.residual());
        let x = Tensor::<f32>::zeros(&[1, 64, 56, 56]);
        let mut ctx = Ctx::new(Mode::Train, &mut rng);
        assert_eq!(b.forward(&x, &mut ctx).unwrap().shape(), &[1, 128, 28, 28]);
    }

    #[test]
    fn gate_bounds_hold() {
        let mut rng = Rng::new(3);
        let mut b = MambaBlock::<f64>::new("b", cfg(4, 4, 1, true), &mut rng).unwrap();
        let x = random(&[2, 4, 8, 8], &mut rng);
        let mut ctx = Ctx::new(Mode::Train, &mut rng);
        b.forward(&x, &mut ctx).unwrap();
        let t = b.trace().unwrap();
        let gate = t.gate.as_ref().unwrap();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
        let gated = t.gated().unwrap();
        for (g, v) in gated.data().iter().zip(t.pre_gate.data()) {
            assert!(g.abs() <= v.abs());
        }
    }

    #[test]
    fn saturated_gate_matches_ungated_block() {
        let c = cfg(4, 4, 1, true);
        let mut gated = MambaBlock::<f64>::new("b", c, &mut Rng::new(9)).unwrap();
        let mut plain = MambaBlock::<f64>::new("b", MambaBlockConfig { use_gate: false, ..c }, &mut Rng::new(9)).unwrap();
        gated.gate.as_mut().unwrap().bias.as_mut().unwrap().value.fill(20.0);
        let mut rng = Rng::new(4);
        let x = random(&[2, 4, 6, 6], &mut rng);
        let a = gated.forward(&x, &mut Ctx::new(Mode::Train, &mut rng)).unwrap();
        let b = plain.forward(&x, &mut Ctx::new(Mode::Train, &mut rng)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-3, "{p} vs {q}");
        }
    }

    #[test]
    fn gate_parameter_delta() {
        let c = cfg(6, 6, 1, true);
        let gated = MambaBlock::<f64>::new("b", c, &mut Rng::new(1)).unwrap();
        let plain = MambaBlock::<f64>::new("b", MambaBlockConfig { use_gate: false, ..c }, &mut Rng::new(1)).unwrap();
        let count = |b: &MambaBlock<f64>| b.params().iter().map(|p| p.numel()).sum::<usize>();
        let hidden = c.hidden();
        assert_eq!(count(&gated) - count(&plain), 9 * hidden + hidden);
        assert_eq!(c.gate_param_count(), 9 * hidden + hidden);
    }

    #[test]
    fn closed_gate_blocks_value_gradient() {
        let mut rng = Rng::new(5);
        let mut b = MambaBlock::<f64>::new("b", cfg(4, 4, 1, true), &mut rng).unwrap();
        b.gate.as_mut().unwrap().bias.as_mut().unwrap().value.fill(-60.0);
        let x = random(&[1, 4, 5, 5], &mut rng);
        b.forward(&x, &mut Ctx::new(Mode::Train, &mut rng)).unwrap();
        let up = random(&[1, 4, 5, 5], &mut rng);
        let dx = b.backward(&up).unwrap();
        // Only the residual path carries gradient once the gate is shut.
        for (d, u) in dx.data().iter().zip(up.data()) {
            assert!((d - u).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_channels_and_backward_first() {
        let mut rng = Rng::new(6);
        let mut b = MambaBlock::<f64>::new("b", cfg(4, 8, 2, true), &mut rng).unwrap();
        assert!(b.backward(&Tensor::zeros(&[1, 8, 2, 2])).is_err());
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert!(b.forward(&x, &mut Ctx::new(Mode::Train, &mut rng)).is_err());
    }
}
