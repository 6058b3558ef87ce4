//! Central-difference gradient checks.
//!
//! For each checked element the relative error is
//! `|a - n| / max(|a|, |n|, floor * max(1, |loss|))` with `a` the analytic
//! and `n` the numeric derivative. The floor keeps directions the loss is
//! invariant to, such as a gain undone by a following batchnorm, from being
//! scored on rounding noise.
//!
//! An element that misses `tol` while its forward and backward one-sided
//! slopes disagree by more than `kink_tol` (relative) straddles a ReLU or
//! max-pool switch inside the step; finite differences say nothing there, so
//! it is counted as a kink and left out of the error. A report with more than a tenth of its checked
//! elements on kinks does not pass.

use crate::block::MambaBlockConfig;
use crate::layers::{
    Act, Activation, AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Ctx, Dropout, Layer, Linear, MaxPool2d, Mode, Sigmoid,
};
use crate::model::{make_variant, FeaturePyramid, Variant};
use crate::optim::mse_loss;
use crate::{MambaBlock, Model, ModelConfig, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub eps: f64,
    /// Elements checked per group; smaller groups are checked exhaustively.
    pub max_per_group: usize,
    pub floor: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    pub kink_tol: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { eps: 1e-5, max_per_group: 24, floor: 1e-6, tol: 1e-4, kink_tol: 2e-4, seed: 0 }
    }
}

/// A scalar function of several tensors with an analytic gradient.
pub trait Objective {
    /// Name and element count of every differentiable tensor.
    fn groups(&self) -> Vec<(String, usize)>;
    fn get(&self, group: usize, index: usize) -> f64;
    fn set(&mut self, group: usize, index: usize, value: f64);
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient for every group, in [`Objective::groups`] order.
    fn gradient(&mut self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub label: String,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn kinks(&self) -> usize {
        self.groups.iter().map(|g| g.kinks).sum()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol && self.kinks() * 10 <= self.checked()
    }

    pub fn render(&self) -> String {
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{}\n{:<width$}  {:>7}  {:>5}  {:>10}\n",
            self.label, "group", "checked", "kinks", "max_rel"
        );
        for g in &self.groups {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>5}  {:>10.3e}\n",
                g.name, g.checked, g.kinks, g.max_rel_err
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e} over {} elements ({} on kinks)\n",
            self.max_rel_err(),
            self.checked(),
            self.kinks()
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn run_gradcheck(label: &str, obj: &mut dyn Objective, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let groups = obj.groups();
    let analytic = obj.gradient()?;
    let base = obj.loss()?;
    let floor = cfg.floor * base.abs().max(1.0);
    let mut results = Vec::with_capacity(groups.len());
    for (g, (name, len)) in groups.iter().enumerate() {
        let mut idx: Vec<usize> = (0..*len).collect();
        if *len > cfg.max_per_group {
            Rng::derive(cfg.seed, &[g as u64]).shuffle(&mut idx);
            idx.truncate(cfg.max_per_group);
            idx.sort_unstable();
        }
        let mut res = GroupResult {
            name: name.clone(),
            checked: idx.len(),
            kinks: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &idx {
            let v0 = obj.get(g, i);
            obj.set(g, i, v0 + cfg.eps);
            let plus = obj.loss()?;
            obj.set(g, i, v0 - cfg.eps);
            let minus = obj.loss()?;
            obj.set(g, i, v0);
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[g][i];
            let err = relative_error(a, numeric, floor);
            let right = (plus - base) / cfg.eps;
            let left = (base - minus) / cfg.eps;
            if err >= cfg.tol && relative_error(right, left, floor) > cfg.kink_tol {
                res.kinks += 1;
                continue;
            }
            if err > res.max_rel_err || !err.is_finite() {
                res.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                res.worst_index = i;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
        results.push(res);
    }
    Ok(GradcheckReport { label: label.to_string(), groups: results })
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.normal(0.0, scale)).collect()).expect("shape/len agree")
}

/// `sum(w * layer(x))` for fixed random weights `w`. Every forward reseeds
/// the layer's RNG, so dropout masks repeat.
pub struct LayerObjective {
    pub layer: Box<dyn Layer<f64>>,
    pub input: Tensor<f64>,
    pub weights: Tensor<f64>,
    pub mode: Mode,
    pub seed: u64,
}

impl LayerObjective {
    pub fn new(layer: Box<dyn Layer<f64>>, input: Tensor<f64>, mode: Mode, seed: u64) -> Result<Self> {
        let mut obj = LayerObjective { layer, input, weights: Tensor::zeros(&[0]), mode, seed };
        let out = obj.forward()?;
        obj.weights = random_tensor(out.shape(), 1.0, &mut Rng::derive(seed, &[0xABCD]));
        Ok(obj)
    }

    fn forward(&mut self) -> Result<Tensor<f64>> {
        let mut rng = Rng::new(self.seed);
        let mut ctx = Ctx::new(self.mode, &mut rng);
        self.layer.forward(&self.input, &mut ctx)
    }
}

impl Objective for LayerObjective {
    fn groups(&self) -> Vec<(String, usize)> {
        let mut g = vec![("input".to_string(), self.input.len())];
        g.extend(self.layer.params().iter().map(|p| (p.name.clone(), p.numel())));
        g
    }

    fn get(&self, group: usize, index: usize) -> f64 {
        match group {
            0 => self.input.data()[index],
            k => self.layer.params()[k - 1].value.data()[index],
        }
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        match group {
            0 => self.input.data_mut()[index] = value,
            k => self.layer.params_mut()[k - 1].value.data_mut()[index] = value,
        }
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(self.forward()?.mul(&self.weights)?.sum())
    }

    fn gradient(&mut self) -> Result<Vec<Vec<f64>>> {
        for p in self.layer.params_mut() {
            p.zero_grad();
        }
        self.forward()?;
        let dx = self.layer.backward(&self.weights)?;
        let mut out = vec![dx.into_vec()];
        out.extend(self.layer.params().iter().map(|p| p.grad.data().to_vec()));
        Ok(out)
    }
}

/// Batch MSE of a full model in training mode, with dropout reseeded on
/// every forward.
pub struct ModelObjective {
    pub model: Model<f64>,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
    pub seed: u64,
}

impl ModelObjective {
    pub fn new(config: &ModelConfig, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, &[1]);
        let model = Model::new(config, &mut rng)?;
        let s = config.input_size;
        let input = random_tensor(&[batch, config.input_channels, s, s], 1.0, &mut rng);
        let target = Tensor::from_vec(&[batch], (0..batch).map(|_| rng.next_f64()).collect())?;
        let mut obj = ModelObjective { model, input, target, seed };
        obj.model.set_mode(Mode::Train);
        Ok(obj)
    }
}

impl Objective for ModelObjective {
    fn groups(&self) -> Vec<(String, usize)> {
        let mut g = vec![("input".to_string(), self.input.len())];
        g.extend(self.model.params().iter().map(|p| (p.name.clone(), p.numel())));
        g
    }

    fn get(&self, group: usize, index: usize) -> f64 {
        match group {
            0 => self.input.data()[index],
            k => self.model.params()[k - 1].value.data()[index],
        }
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        match group {
            0 => self.input.data_mut()[index] = value,
            k => self.model.params_mut()[k - 1].value.data_mut()[index] = value,
        }
    }

    fn loss(&mut self) -> Result<f64> {
        let pred = self.model.forward(&self.input, &mut Rng::new(self.seed))?;
        Ok(mse_loss(&pred, &self.target)?.0)
    }

    fn gradient(&mut self) -> Result<Vec<Vec<f64>>> {
        self.model.zero_grad();
        let pred = self.model.forward(&self.input, &mut Rng::new(self.seed))?;
        let (_, grad) = mse_loss(&pred, &self.target)?;
        let dx = self.model.backward(&grad)?;
        let mut out = vec![dx.into_vec()];
        out.extend(self.model.params().iter().map(|p| p.grad.data().to_vec()));
        Ok(out)
    }
}

/// Which built-in set of objectives to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckPreset {
    Layers,
    Blocks,
    Model(Variant),
}

impl std::str::FromStr for GradcheckPreset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(GradcheckPreset::Layers),
            "block" | "blocks" => Ok(GradcheckPreset::Blocks),
            "tiny" => Ok(GradcheckPreset::Model(Variant::D)),
            other => {
                let label = other.strip_prefix("tiny-").unwrap_or(other);
                label.parse().map(GradcheckPreset::Model).map_err(|_| {
                    crate::Error::InvalidConfig(format!(
                        "unknown gradcheck preset `{other}` (expected layers, block, tiny, or tiny-A..tiny-D)"
                    ))
                })
            }
        }
    }
}

/// Label, layer, input shape, mode and the input scale.
type LayerCase = (String, Box<dyn Layer<f64>>, Vec<usize>, Mode, f64);

fn layer_cases(seed: u64) -> Result<Vec<(String, LayerObjective)>> {
    let mut rng = Rng::derive(seed, &[7]);
    let mut cases: Vec<LayerCase> = Vec::new();
    let r = &mut rng;
    cases.push(("conv3x3 s2".into(), Box::new(Conv2d::new("conv", 3, 4, 3, 2, 1, 1, true, r)?), vec![2, 3, 7, 7], Mode::Train, 1.0));
    cases.push(("conv7x7 s2 stem".into(), Box::new(Conv2d::new("stem", 3, 4, 7, 2, 3, 1, false, r)?), vec![1, 3, 9, 9], Mode::Train, 1.0));
    cases.push(("conv grouped".into(), Box::new(Conv2d::new("grouped", 4, 6, 3, 1, 1, 2, true, r)?), vec![2, 4, 5, 5], Mode::Train, 1.0));
    cases.push(("conv depthwise".into(), Box::new(Conv2d::new("dw", 4, 4, 3, 1, 1, 4, true, r)?), vec![2, 4, 6, 6], Mode::Train, 1.0));
    cases.push(("conv depthwise s2".into(), Box::new(Conv2d::new("dw2", 3, 3, 3, 2, 1, 3, false, r)?), vec![2, 3, 7, 7], Mode::Train, 1.0));
    cases.push(("conv pointwise".into(), Box::new(Conv2d::new("pw", 5, 3, 1, 1, 0, 1, false, r)?), vec![2, 5, 4, 4], Mode::Train, 1.0));
    cases.push(("maxpool 3/2/1".into(), Box::new(MaxPool2d::new(3, 2, 1)), vec![2, 3, 7, 7], Mode::Train, 1.0));
    cases.push(("adaptive avgpool".into(), Box::new(AdaptiveAvgPool2d::new(3, 2)), vec![2, 3, 7, 5], Mode::Train, 1.0));
    cases.push(("feature pyramid".into(), Box::new(FeaturePyramid::new(&[1, 2, 4])), vec![2, 3, 5, 5], Mode::Train, 1.0));
    cases.push(("linear".into(), Box::new(Linear::new("fc", 5, 4, r)), vec![3, 5], Mode::Train, 1.0));
    cases.push(("batchnorm train".into(), Box::new(BatchNorm2d::new("bn", 4)), vec![3, 4, 3, 3], Mode::Train, 1.0));
    cases.push(("dropout train".into(), Box::new(Dropout::new(0.3)), vec![4, 10], Mode::Train, 1.0));
    cases.push(("relu".into(), Box::new(Act::new(Activation::Relu)), vec![4, 10], Mode::Train, 1.0));
    cases.push(("relu6".into(), Box::new(Act::new(Activation::Relu6)), vec![4, 10], Mode::Train, 4.0));
    cases.push(("silu".into(), Box::new(Act::new(Activation::Silu)), vec![4, 10], Mode::Train, 2.0));
    cases.push(("sigmoid".into(), Box::new(Sigmoid::new()), vec![4, 10], Mode::Train, 3.0));
    let mut out = Vec::new();
    for (k, (name, layer, shape, mode, scale)) in cases.into_iter().enumerate() {
        let input = random_tensor(&shape, scale, &mut Rng::derive(seed, &[8, k as u64]));
        out.push((name, LayerObjective::new(layer, input, mode, seed)?));
    }
    let mut bn_eval = BatchNorm2d::<f64>::new("bn_eval", 3);
    let warm = random_tensor(&[4, 3, 3, 3], 1.0, &mut rng);
    bn_eval.forward(&warm, &mut Ctx::new(Mode::Train, &mut Rng::new(0)))?;
    let input = random_tensor(&[2, 3, 3, 3], 1.0, &mut rng);
    out.push(("batchnorm eval".into(), LayerObjective::new(Box::new(bn_eval), input, Mode::Eval, seed)?));
    Ok(out)
}

fn block_cases(seed: u64) -> Result<Vec<(String, LayerObjective)>> {
    let base = MambaBlockConfig {
        in_channels: 4,
        out_channels: 4,
        stride: 1,
        expansion_factor: 2,
        use_gate: true,
        use_batchnorm: true,
        activation: Activation::Relu,
    };
    let configs = [
        ("gated residual", base),
        ("gated s2 widen", MambaBlockConfig { out_channels: 6, stride: 2, ..base }),
        ("ungated residual", MambaBlockConfig { use_gate: false, ..base }),
        ("gated no batchnorm", MambaBlockConfig { use_batchnorm: false, activation: Activation::Silu, ..base }),
    ];
    let mut out = Vec::new();
    for (k, (name, cfg)) in configs.into_iter().enumerate() {
        let mut rng = Rng::derive(seed, &[9, k as u64]);
        let block = MambaBlock::<f64>::new("block", cfg, &mut rng)?;
        let input = random_tensor(&[2, 4, 6, 6], 1.0, &mut rng);
        out.push((name.to_string(), LayerObjective::new(Box::new(block), input, Mode::Train, seed)?));
    }
    Ok(out)
}

pub fn gradcheck_preset(preset: GradcheckPreset, cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    match preset {
        GradcheckPreset::Layers => layer_cases(cfg.seed)?
            .into_iter()
            .map(|(name, mut obj)| run_gradcheck(&name, &mut obj, cfg))
            .collect(),
        GradcheckPreset::Blocks => block_cases(cfg.seed)?
            .into_iter()
            .map(|(name, mut obj)| run_gradcheck(&name, &mut obj, cfg))
            .collect(),
        GradcheckPreset::Model(v) => {
            let config = make_variant(&ModelConfig::gradcheck_tiny(), v);
            Ok(vec![gradcheck_model(&config, &format!("tiny model, variant {v}"), cfg)?])
        }
    }
}

/// Checks a full model on a batch of two random inputs.
pub fn gradcheck_model(config: &ModelConfig, label: &str, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut obj = ModelObjective::new(config, 2, cfg.seed)?;
    run_gradcheck(label, &mut obj, cfg)
}
