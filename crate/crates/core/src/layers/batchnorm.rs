use super::{join_name, Ctx, Layer, Mode, Parameter};
use crate::{Error, Result, Scalar, Tensor};

/// Per-channel batch normalization over `N×H×W`.
///
/// Running statistics start out unset. The first training-mode batch
/// initializes them to that batch's mean and unbiased variance; later batches
/// blend in with `momentum`. Evaluation mode refuses to run until they are set.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<S> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub stats_initialized: bool,
    pub momentum: f64,
    pub eps: f64,
    name: String,
    cache: Option<Cache<S>>,
}

#[derive(Debug, Clone)]
struct Cache<S> {
    x_hat: Tensor<S>,
    inv_std: Vec<S>,
    mode: Mode,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(join_name(name, "gamma"), Tensor::ones(&[channels]), false),
            beta: Parameter::new(join_name(name, "beta"), Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            stats_initialized: false,
            momentum: 0.1,
            eps: 1e-5,
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn running_mean_name(&self) -> String {
        join_name(&self.name, "running_mean")
    }

    pub fn running_var_name(&self) -> String {
        join_name(&self.name, "running_var")
    }

    fn run(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let (n, c, h, w) = x.dims4("batchnorm2d")?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                expected: vec![self.channels()],
                got: vec![c],
            });
        }
        let hw = h * w;
        let m = n * hw;
        if m == 0 {
            return Err(Error::EmptyInput("batchnorm2d"));
        }
        let data = x.data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        for &v in &data[(ni * c + ch) * hw..][..hw] {
                            s += v.as_f64();
                        }
                    }
                    let mu = s / m as f64;
                    let mut sq = 0.0;
                    for ni in 0..n {
                        for &v in &data[(ni * c + ch) * hw..][..hw] {
                            let d = v.as_f64() - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbiased = |v: f64| if m > 1 { v * m as f64 / (m - 1) as f64 } else { v };
                let rm = self.running_mean.data_mut();
                for ch in 0..c {
                    rm[ch] = if self.stats_initialized {
                        S::lit((1.0 - self.momentum) * rm[ch].as_f64() + self.momentum * mean[ch])
                    } else {
                        S::lit(mean[ch])
                    };
                }
                let rv = self.running_var.data_mut();
                for ch in 0..c {
                    let u = unbiased(var[ch]);
                    rv[ch] = if self.stats_initialized {
                        S::lit((1.0 - self.momentum) * rv[ch].as_f64() + self.momentum * u)
                    } else {
                        S::lit(u)
                    };
                }
                self.stats_initialized = true;
                (mean, var)
            }
            Mode::Eval => {
                if !self.stats_initialized {
                    return Err(Error::UninitializedRunningStats);
                }
                (
                    self.running_mean.to_f64_vec(),
                    self.running_var.to_f64_vec(),
                )
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::lit(1.0 / (v + self.eps).sqrt())).collect();
        let mean_s: Vec<S> = mean.iter().map(|&v| S::lit(v)).collect();
        let mut x_hat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * hw;
                let src = &data[off..off + hw];
                let xh = &mut x_hat.data_mut()[off..off + hw];
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - mean_s[ch]) * inv_std[ch];
                }
                let dst = &mut out.data_mut()[off..off + hw];
                for (d, &v) in dst.iter_mut().zip(&x_hat.data()[off..off + hw]) {
                    *d = g[ch] * v + b[ch];
                }
            }
        }
        self.cache = Some(Cache {
            x_hat,
            inv_std,
            mode,
        });
        Ok(out)
    }
}

/// One normalization pass in the given mode; see [`BatchNorm2d`].
pub fn batchnorm2d_forward<S: Scalar>(input: &Tensor<S>, state: &mut BatchNorm2d<S>, mode: Mode) -> Result<Tensor<S>> {
    state.run(input, mode)
}

impl<S: Scalar> Layer<S> for BatchNorm2d<S> {
    fn forward(&mut self, x: &Tensor<S>, ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        self.run(x, ctx.mode)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::BackwardBeforeForward("batchnorm2d"))?;
        let (n, c, h, w) = cache.x_hat.dims4("batchnorm2d")?;
        if grad.shape() != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d backward",
                expected: cache.x_hat.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        let hw = h * w;
        let m = S::lit((n * hw) as f64);
        let dy = grad.data();
        let xh = cache.x_hat.data();
        let mut sum_dy = vec![S::zero(); c];
        let mut sum_dy_xh = vec![S::zero(); c];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * hw;
                for i in off..off + hw {
                    sum_dy[ch] += dy[i];
                    sum_dy_xh[ch] += dy[i] * xh[i];
                }
            }
        }
        self.gamma.accumulate(&sum_dy_xh);
        self.beta.accumulate(&sum_dy);
        let g = self.gamma.value.data();
        let mut dx = Tensor::zeros(grad.shape());
        let d = dx.data_mut();
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * hw;
                let k = g[ch] * cache.inv_std[ch];
                match cache.mode {
                    Mode::Train => {
                        let mean_dy = sum_dy[ch] / m;
                        let mean_dy_xh = sum_dy_xh[ch] / m;
                        for i in off..off + hw {
                            d[i] = k * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
                        }
                    }
                    Mode::Eval => {
                        for i in off..off + hw {
                            d[i] = k * dy[i];
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.normal(2.0, 3.0)).collect()).unwrap()
    }

    #[test]
    fn train_mode_normalizes() {
        let mut rng = Rng::new(7);
        let x = random(&[4, 3, 5, 5], &mut rng);
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        let y = batchnorm2d_forward(&x, &mut bn, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + ch) * 25..][..25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.2);
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.beta.value.data_mut()[0] = 0.75;
        let y = batchnorm2d_forward(&x, &mut bn, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-9));
    }

    #[test]
    fn eval_is_pure_and_needs_stats() {
        let mut rng = Rng::new(8);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        assert!(matches!(
            batchnorm2d_forward(&x, &mut bn, Mode::Eval),
            Err(Error::UninitializedRunningStats)
        ));
        batchnorm2d_forward(&x, &mut bn, Mode::Train).unwrap();
        let a = batchnorm2d_forward(&x, &mut bn, Mode::Eval).unwrap();
        let b = batchnorm2d_forward(&x, &mut bn, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        batchnorm2d_forward(&Tensor::full(&[1, 1, 2, 2], 1.0), &mut bn, Mode::Train).unwrap();
        assert_eq!(bn.running_mean.data(), &[1.0]);
        batchnorm2d_forward(&Tensor::full(&[1, 1, 2, 2], 3.0), &mut bn, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 1.2).abs() < 1e-12);
    }
}
