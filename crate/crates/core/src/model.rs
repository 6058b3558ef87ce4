//! Full network: convolutional stem, gated block stages, multi-scale feature
//! pyramid (or global average pooling) and the regression head.
//!
//! Parameter enumeration order, which checkpoints rely on:
//! `stem.conv`, `stem.bn`, then every block in stage order
//! (`stage{i}.block{j}.*`, see [`MambaBlock`]), then `head.fc{k}` for each
//! hidden head layer and finally `head.out`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::block::{MambaBlock, MambaBlockConfig};
use crate::layers::{
    adaptive_avg_pool2d, conv_out_extent, Act, Activation, AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Ctx, Dropout,
    Layer, Linear, MaxPool2d, Mode, Parameter, Sigmoid,
};
use crate::{Error, Result, Rng, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Stem width followed by the output width of each block stage.
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub expansion_factor: usize,
    pub use_gate: bool,
    pub use_pyramid: bool,
    pub pyramid_scales: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub head_dropout: Vec<f64>,
    pub input_size: usize,
    pub input_channels: usize,
    pub activation: Activation,
    pub use_batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![64, 64, 128, 256, 512],
            stage_strides: vec![1, 2, 2, 2],
            blocks_per_stage: vec![1, 1, 1, 2],
            expansion_factor: 4,
            use_gate: true,
            use_pyramid: true,
            pyramid_scales: vec![1, 2, 4],
            head_widths: vec![512, 128],
            head_dropout: vec![0.5, 0.3],
            input_size: 224,
            input_channels: 3,
            activation: Activation::Relu,
            use_batchnorm: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale network for 48x48 inputs: 12x12 after the stem, 6x6 at the end.
    pub fn tiny() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64],
            stage_strides: vec![1, 2, 1],
            blocks_per_stage: vec![1, 1, 1],
            expansion_factor: 4,
            head_widths: vec![64, 32],
            head_dropout: vec![0.2, 0.1],
            input_size: 48,
            ..Self::default()
        }
    }

    /// Smallest network that still exercises every component, for gradient checks.
    pub fn gradcheck_tiny() -> Self {
        Self {
            stage_channels: vec![8, 8, 16],
            stage_strides: vec![1, 2],
            blocks_per_stage: vec![1, 1],
            expansion_factor: 2,
            head_widths: vec![16],
            head_dropout: vec![0.3],
            input_size: 32,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_strides.len()
    }

    /// Aggregation scales actually used: the pyramid, or `[1]` (global average).
    pub fn effective_scales(&self) -> Vec<usize> {
        if self.use_pyramid {
            self.pyramid_scales.clone()
        } else {
            vec![1]
        }
    }

    pub fn last_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    /// Width of the vector entering the regression head.
    pub fn head_input_width(&self) -> usize {
        self.last_channels() * self.effective_scales().iter().map(|s| s * s).sum::<usize>()
    }

    /// Block configurations in forward order.
    pub fn block_configs(&self) -> Vec<(usize, MambaBlockConfig)> {
        let mut out = Vec::new();
        for stage in 0..self.num_stages() {
            for j in 0..self.blocks_per_stage[stage] {
                let first = j == 0;
                out.push((
                    stage,
                    MambaBlockConfig {
                        in_channels: if first {
                            self.stage_channels[stage]
                        } else {
                            self.stage_channels[stage + 1]
                        },
                        out_channels: self.stage_channels[stage + 1],
                        stride: if first { self.stage_strides[stage] } else { 1 },
                        expansion_factor: self.expansion_factor,
                        use_gate: self.use_gate,
                        use_batchnorm: self.use_batchnorm,
                        activation: self.activation,
                    },
                ));
            }
        }
        out
    }

    /// Spatial extent after the stem and after each stage.
    pub fn spatial_ladder(&self) -> Result<Vec<usize>> {
        let mut s = conv_out_extent(self.input_size, 7, 2, 3)?;
        s = conv_out_extent(s, 3, 2, 1)?;
        let mut ladder = vec![s];
        for &stride in &self.stage_strides {
            s = conv_out_extent(s, 3, stride, 1)?;
            ladder.push(s);
        }
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_channels.len() != self.num_stages() + 1 {
            return bad(format!(
                "stage_channels has {} entries, expected stem + {} stages",
                self.stage_channels.len(),
                self.num_stages()
            ));
        }
        if self.blocks_per_stage.len() != self.num_stages() {
            return bad("stage_strides and blocks_per_stage differ in length".into());
        }
        if self.num_stages() == 0 {
            return bad("at least one block stage is required".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.stage_channels.contains(&0) || self.expansion_factor == 0 {
            return bad("channel widths and expansion factor must be positive".into());
        }
        if self.stage_strides.iter().any(|s| !(1..=2).contains(s)) {
            return bad("stage strides must be 1 or 2".into());
        }
        if self.head_widths.len() != self.head_dropout.len() {
            return bad("head_widths and head_dropout differ in length".into());
        }
        if self.head_dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("head dropout rates must lie in [0, 1)".into());
        }
        if self.head_widths.contains(&0) {
            return bad("head widths must be positive".into());
        }
        let scales = self.effective_scales();
        if scales.is_empty() || scales.contains(&0) {
            return bad("pyramid scales must be positive".into());
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        let ladder = self.spatial_ladder()?;
        let last = *ladder.last().unwrap();
        if let Some(&max) = scales.iter().max() {
            if max > last {
                return bad(format!("pyramid scale {max} exceeds final feature extent {last}"));
            }
        }
        Ok(())
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain inverted residual blocks, global average pooling.
    A,
    /// Plain blocks with the feature pyramid.
    B,
    /// Gated blocks with global average pooling.
    C,
    /// Gated blocks with the feature pyramid (full model).
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn gate(self) -> bool {
        matches!(self, Variant::C | Variant::D)
    }

    pub fn pyramid(self) -> bool {
        matches!(self, Variant::B | Variant::D)
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "Baseline CNN",
            Variant::B => "+ Feature Pyramid",
            Variant::C => "+ SSM Gate",
            Variant::D => "Full Model",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

pub fn make_variant(config: &ModelConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        use_gate: variant.gate(),
        use_pyramid: variant.pyramid(),
        ..config.clone()
    }
}

/// Parses a variant label and applies it.
pub fn make_variant_str(config: &ModelConfig, label: &str) -> Result<ModelConfig> {
    Ok(make_variant(config, label.parse()?))
}

/// Adaptive average pools at each scale, flattened per sample and
/// concatenated in scale order.
pub fn feature_pyramid<S: Scalar>(features: &Tensor<S>, scales: &[usize]) -> Result<Tensor<S>> {
    let (n, c, _, _) = features.dims4("feature_pyramid")?;
    let width: usize = c * scales.iter().map(|s| s * s).sum::<usize>();
    let mut out = vec![S::zero(); n * width];
    let mut offset = 0;
    for &s in scales {
        let pooled = adaptive_avg_pool2d(features, s, s)?;
        let chunk = c * s * s;
        for ni in 0..n {
            out[ni * width + offset..ni * width + offset + chunk]
                .copy_from_slice(&pooled.data()[ni * chunk..(ni + 1) * chunk]);
        }
        offset += chunk;
    }
    Tensor::from_vec(&[n, width], out)
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub scales: Vec<usize>,
    pools: Vec<AdaptiveAvgPool2d>,
    cached_shape: Option<Vec<usize>>,
}

impl FeaturePyramid {
    pub fn new(scales: &[usize]) -> Self {
        Self {
            scales: scales.to_vec(),
            pools: scales.iter().map(|&s| AdaptiveAvgPool2d::new(s, s)).collect(),
            cached_shape: None,
        }
    }
}

impl<S: Scalar> Layer<S> for FeaturePyramid {
    fn forward(&mut self, x: &Tensor<S>, ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let (n, c, _, _) = x.dims4("feature_pyramid")?;
        let width: usize = c * self.scales.iter().map(|s| s * s).sum::<usize>();
        let mut out = vec![S::zero(); n * width];
        let mut offset = 0;
        for pool in &mut self.pools {
            let pooled = Layer::<S>::forward(pool, x, ctx)?;
            let chunk = c * pool.out_h * pool.out_w;
            for ni in 0..n {
                out[ni * width + offset..ni * width + offset + chunk]
                    .copy_from_slice(&pooled.data()[ni * chunk..(ni + 1) * chunk]);
            }
            offset += chunk;
        }
        self.cached_shape = Some(x.shape().to_vec());
        Tensor::from_vec(&[n, width], out)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self
            .cached_shape
            .take()
            .ok_or(Error::BackwardBeforeForward("feature_pyramid"))?;
        let (n, c) = (shape[0], shape[1]);
        let (gn, width) = grad.dims2("feature_pyramid backward")?;
        if gn != n {
            return Err(Error::InvalidShape("feature_pyramid backward: batch size".into()));
        }
        let mut dx = Tensor::zeros(&shape);
        let mut offset = 0;
        for pool in &mut self.pools {
            let chunk = c * pool.out_h * pool.out_w;
            let mut g = Vec::with_capacity(n * chunk);
            for ni in 0..n {
                g.extend_from_slice(&grad.data()[ni * width + offset..ni * width + offset + chunk]);
            }
            let g = Tensor::from_vec(&[n, c, pool.out_h, pool.out_w], g)?;
            dx.add_assign(&Layer::<S>::backward(pool, &g)?)?;
            offset += chunk;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
struct HeadLayer<S> {
    fc: Linear<S>,
    act: Act<S>,
    dropout: Dropout<S>,
}

/// Shapes observed during one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub stem: Vec<usize>,
    pub stages: Vec<Vec<usize>>,
    pub head_input: Vec<usize>,
    pub output: Vec<usize>,
}

/// Copy of every parameter and running statistic, in enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    pub params: Vec<Tensor<S>>,
    pub buffers: Vec<Tensor<S>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Per owning module (parameter name without its last component).
    pub per_module: Vec<(String, usize)>,
}

#[derive(Debug, Clone)]
pub struct Model<S> {
    pub config: ModelConfig,
    stem_conv: Conv2d<S>,
    stem_bn: Option<BatchNorm2d<S>>,
    stem_act: Act<S>,
    stem_pool: MaxPool2d,
    blocks: Vec<MambaBlock<S>>,
    block_stage: Vec<usize>,
    pyramid: FeaturePyramid,
    head: Vec<HeadLayer<S>>,
    out: Linear<S>,
    out_sigmoid: Sigmoid<S>,
    mode: Mode,
    batch: Option<usize>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let bn = config.use_batchnorm;
        let stem_conv = Conv2d::new(
            "stem.conv",
            config.input_channels,
            config.stage_channels[0],
            7,
            2,
            3,
            1,
            !bn,
            rng,
        )?;
        let mut blocks = Vec::new();
        let mut block_stage = Vec::new();
        let mut per_stage = vec![0usize; config.num_stages()];
        for (stage, bc) in config.block_configs() {
            let name = format!("stage{stage}.block{}", per_stage[stage]);
            per_stage[stage] += 1;
            let mut brng = rng.fork();
            blocks.push(MambaBlock::new(&name, bc, &mut brng)?);
            block_stage.push(stage);
        }
        let mut hrng = rng.fork();
        let mut head = Vec::new();
        let mut width = config.head_input_width();
        for (k, (&w, &p)) in config.head_widths.iter().zip(&config.head_dropout).enumerate() {
            head.push(HeadLayer {
                fc: Linear::new(&format!("head.fc{k}"), width, w, &mut hrng),
                act: Act::new(config.activation),
                dropout: Dropout::new(p),
            });
            width = w;
        }
        let out = Linear::new("head.out", width, 1, &mut hrng);
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn: bn.then(|| BatchNorm2d::new("stem.bn", config.stage_channels[0])),
            stem_act: Act::new(config.activation),
            stem_pool: MaxPool2d::new(3, 2, 1),
            blocks,
            block_stage,
            pyramid: FeaturePyramid::new(&config.effective_scales()),
            head,
            out,
            out_sigmoid: Sigmoid::new(),
            mode: Mode::Train,
            batch: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn blocks(&self) -> &[MambaBlock<S>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [MambaBlock<S>] {
        &mut self.blocks
    }

    fn forward_impl(&mut self, x: &Tensor<S>, rng: &mut Rng, mut trace: Option<&mut ShapeTrace>) -> Result<Tensor<S>> {
        let (n, c, h, w) = x.dims4("model input")?;
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected: vec![n, self.config.input_channels, s, s],
                got: x.shape().to_vec(),
            });
        }
        let mut ctx = Ctx::new(self.mode, rng);
        let mut t = self.stem_conv.forward(x, &mut ctx)?;
        if let Some(bn) = &mut self.stem_bn {
            t = bn.forward(&t, &mut ctx)?;
        }
        t = self.stem_act.forward(&t, &mut ctx)?;
        t = Layer::<S>::forward(&mut self.stem_pool, &t, &mut ctx)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.stem = t.shape().to_vec();
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            t = block.forward(&t, &mut ctx)?;
            let last_of_stage = self.block_stage.get(i + 1) != Some(&self.block_stage[i]);
            if let (Some(tr), true) = (trace.as_deref_mut(), last_of_stage) {
                tr.stages.push(t.shape().to_vec());
            }
        }
        t = Layer::<S>::forward(&mut self.pyramid, &t, &mut ctx)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.head_input = t.shape().to_vec();
        }
        for layer in &mut self.head {
            t = layer.fc.forward(&t, &mut ctx)?;
            t = layer.act.forward(&t, &mut ctx)?;
            t = layer.dropout.forward(&t, &mut ctx)?;
        }
        t = self.out.forward(&t, &mut ctx)?;
        t = self.out_sigmoid.forward(&t, &mut ctx)?;
        let y = t.reshape(&[n])?;
        if let Some(tr) = trace {
            tr.output = y.shape().to_vec();
        }
        self.batch = Some(n);
        Ok(y)
    }

    /// Scores in (0, 1), one per sample. `rng` drives dropout in training mode.
    pub fn forward(&mut self, x: &Tensor<S>, rng: &mut Rng) -> Result<Tensor<S>> {
        self.forward_impl(x, rng, None)
    }

    pub fn forward_traced(&mut self, x: &Tensor<S>, rng: &mut Rng) -> Result<(Tensor<S>, ShapeTrace)> {
        let mut tr = ShapeTrace {
            stem: Vec::new(),
            stages: Vec::new(),
            head_input: Vec::new(),
            output: Vec::new(),
        };
        let y = self.forward_impl(x, rng, Some(&mut tr))?;
        Ok((y, tr))
    }

    /// Backpropagates `d loss / d output` (shape `[N]`), accumulating into
    /// parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let n = self.batch.take().ok_or(Error::BackwardBeforeForward("model"))?;
        let mut g = grad.clone().reshape(&[n, 1])?;
        g = self.out_sigmoid.backward(&g)?;
        g = self.out.backward(&g)?;
        for layer in self.head.iter_mut().rev() {
            g = layer.dropout.backward(&g)?;
            g = layer.act.backward(&g)?;
            g = layer.fc.backward(&g)?;
        }
        g = Layer::<S>::backward(&mut self.pyramid, &g)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        g = Layer::<S>::backward(&mut self.stem_pool, &g)?;
        g = self.stem_act.backward(&g)?;
        if let Some(bn) = &mut self.stem_bn {
            g = bn.backward(&g)?;
        }
        self.stem_conv.backward(&g)
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut v = self.stem_conv.params();
        if let Some(bn) = &self.stem_bn {
            v.extend(bn.params());
        }
        for b in &self.blocks {
            v.extend(b.params());
        }
        for h in &self.head {
            v.extend(h.fc.params());
        }
        v.extend(self.out.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = self.stem_conv.params_mut();
        if let Some(bn) = &mut self.stem_bn {
            v.extend(bn.params_mut());
        }
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        for h in &mut self.head {
            v.extend(h.fc.params_mut());
        }
        v.extend(self.out.params_mut());
        v
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<S>> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm2d<S>> {
        let mut v: Vec<&BatchNorm2d<S>> = self.stem_bn.iter().collect();
        for b in &self.blocks {
            v.extend(b.batchnorms());
        }
        v
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<S>> {
        let mut v: Vec<&mut BatchNorm2d<S>> = self.stem_bn.iter_mut().collect();
        for b in &mut self.blocks {
            v.extend(b.batchnorms_mut());
        }
        v
    }

    /// Non-trainable state: for each batchnorm, running mean, running
    /// variance and a one-element initialized flag.
    pub fn named_buffers(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for bn in self.batchnorms() {
            out.push((bn.running_mean_name(), bn.running_mean.clone()));
            out.push((bn.running_var_name(), bn.running_var.clone()));
            let flag = if bn.stats_initialized { S::one() } else { S::zero() };
            out.push((
                format!("{}.stats_initialized", bn.name()),
                Tensor::full(&[1], flag),
            ));
        }
        out
    }

    pub fn load_buffers(&mut self, buffers: &[Tensor<S>]) -> Result<()> {
        let bns = self.batchnorms_mut();
        if buffers.len() != bns.len() * 3 {
            return Err(Error::InvalidShape(format!(
                "expected {} buffers, got {}",
                bns.len() * 3,
                buffers.len()
            )));
        }
        for (bn, chunk) in bns.into_iter().zip(buffers.chunks(3)) {
            if chunk[0].shape() != bn.running_mean.shape() || chunk[1].shape() != bn.running_var.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load buffers",
                    expected: bn.running_mean.shape().to_vec(),
                    got: chunk[0].shape().to_vec(),
                });
            }
            bn.running_mean = chunk[0].clone();
            bn.running_var = chunk[1].clone();
            bn.stats_initialized = chunk[2].data().first().is_some_and(|&v| v != S::zero());
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ModelState<S> {
        ModelState {
            params: self.params().iter().map(|p| p.value.clone()).collect(),
            buffers: self.named_buffers().into_iter().map(|(_, t)| t).collect(),
        }
    }

    pub fn restore(&mut self, state: &ModelState<S>) -> Result<()> {
        let params = self.params_mut();
        if params.len() != state.params.len() {
            return Err(Error::InvalidShape(format!(
                "snapshot holds {} parameters, model has {}",
                state.params.len(),
                params.len()
            )));
        }
        for (p, v) in params.into_iter().zip(&state.params) {
            if p.value.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore",
                    expected: p.value.shape().to_vec(),
                    got: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        self.load_buffers(&state.buffers)
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut per_module: Vec<(String, usize)> = Vec::new();
        let mut total = 0;
        for p in self.params() {
            let module = p.name.rsplit_once('.').map_or(p.name.as_str(), |(m, _)| m);
            match per_module.last_mut() {
                Some((m, n)) if m == module => *n += p.numel(),
                _ => per_module.push((module.to_string(), p.numel())),
            }
            total += p.numel();
        }
        ParamCount { total, per_module }
    }

    /// Sum over blocks of the gate conv parameter counts.
    pub fn gate_parameter_total(&self) -> usize {
        self.blocks.iter().map(|b| b.config.gate_param_count()).sum()
    }
}

pub fn count_parameters<S: Scalar>(model: &Model<S>) -> ParamCount {
    model.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ladder_and_widths() {
        let c = ModelConfig::default();
        assert_eq!(c.spatial_ladder().unwrap(), vec![56, 56, 28, 14, 7]);
        assert_eq!(c.head_input_width(), 10752);
        let a = make_variant(&c, Variant::A);
        assert_eq!(a.head_input_width(), 512);
        assert_eq!(make_variant(&c, Variant::B).head_input_width(), 21 * 512);
        assert_eq!(make_variant(&c, Variant::D), c);
        let cv = make_variant(&c, Variant::C);
        assert_eq!(ModelConfig { use_gate: false, ..cv.clone() }, a);
    }

    #[test]
    fn variant_labels() {
        assert_eq!("D".parse::<Variant>().unwrap(), Variant::D);
        assert!(matches!("E".parse::<Variant>(), Err(Error::UnknownVariant(_))));
        assert!(make_variant_str(&ModelConfig::default(), "Z").is_err());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let c = ModelConfig {
            blocks_per_stage: vec![1, 1],
            ..ModelConfig::default()
        };
        assert!(Model::<f32>::new(&c, &mut Rng::new(0)).is_err());
        let c = ModelConfig {
            pyramid_scales: vec![1, 2, 8],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pyramid_values() {
        let x = Tensor::<f64>::full(&[2, 3, 8, 8], 0.25);
        let p = feature_pyramid(&x, &[1, 2, 4]).unwrap();
        assert_eq!(p.shape(), &[2, 3 * 21]);
        assert!(p.data().iter().all(|&v| v == 0.25));

        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::from_vec(&[1, 2, 5, 5], (0..50).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let gap = feature_pyramid(&x, &[1]).unwrap();
        let direct = adaptive_avg_pool2d(&x, 1, 1).unwrap();
        assert_eq!(gap.data(), direct.data());
        assert!(feature_pyramid(&x, &[6]).is_err());
    }

    #[test]
    fn parameter_formulas() {
        let mut rng = Rng::new(2);
        let lin = Linear::<f64>::new("fc", 7, 3, &mut rng);
        assert_eq!(lin.params().iter().map(|p| p.numel()).sum::<usize>(), 7 * 3 + 3);
        let conv = Conv2d::<f64>::new("c", 4, 6, 3, 1, 1, 1, false, &mut rng).unwrap();
        assert_eq!(conv.params().iter().map(|p| p.numel()).sum::<usize>(), 6 * 4 * 9);

        let base = ModelConfig::tiny();
        let b = Model::<f32>::new(&make_variant(&base, Variant::B), &mut Rng::new(3)).unwrap();
        let d = Model::<f32>::new(&make_variant(&base, Variant::D), &mut Rng::new(3)).unwrap();
        assert_eq!(
            d.count_parameters().total - b.count_parameters().total,
            d.gate_parameter_total()
        );
        let per: usize = d.count_parameters().per_module.iter().map(|(_, n)| n).sum();
        assert_eq!(per, d.count_parameters().total);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let c = ModelConfig::tiny();
        let a = Model::<f64>::new(&c, &mut Rng::new(5)).unwrap();
        let b = Model::<f64>::new(&c, &mut Rng::new(5)).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        let names: Vec<_> = a.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names[0], "stem.conv.weight");
        assert_eq!(names.last().unwrap(), "head.out.bias");
    }

    #[test]
    fn output_range_and_eval_purity() {
        let c = ModelConfig::tiny();
        let mut m = Model::<f64>::new(&c, &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(7);
        let x = Tensor::from_vec(&[2, 3, 48, 48], (0..2 * 3 * 48 * 48).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let y = m.forward(&x, &mut rng).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        m.set_mode(Mode::Eval);
        let a = m.forward(&x, &mut rng).unwrap();
        let b = m.forward(&x, &mut rng).unwrap();
        assert_eq!(a, b);
        let wrong = Tensor::<f64>::zeros(&[1, 3, 32, 32]);
        assert!(m.forward(&wrong, &mut rng).is_err());
    }
}
