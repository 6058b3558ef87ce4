use super::{conv_out_extent, Ctx, Layer};
use crate::{Error, Result, Scalar, Tensor};

/// Window maximum with implicit negative-infinity padding. Returns the pooled
/// tensor and, per output element, the flat input index that won.
pub fn maxpool2d_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if pad * 2 > kernel {
        return Err(Error::InvalidConfig(format!(
            "maxpool2d: padding {pad} exceeds half the window {kernel}"
        )));
    }
    let ho = conv_out_extent(h, kernel, stride, pad)?;
    let wo = conv_out_extent(w, kernel, stride, pad)?;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let x = input.data();
    let o = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = S::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best || (x[idx].is_nan() && !best.is_nan()) {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                let oi = (plane * ho + oy) * wo + ox;
                o[oi] = best;
                arg[oi] = best_i;
            }
        }
    }
    Ok((out, arg))
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }
}

impl<S: Scalar> Layer<S> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<S>, _ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let (y, arg) = maxpool2d_forward(x, self.kernel, self.stride, self.pad)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, arg) = self
            .cache
            .take()
            .ok_or(Error::BackwardBeforeForward("maxpool2d"))?;
        if grad.len() != arg.len() {
            return Err(Error::InvalidShape("maxpool2d backward: gradient size".into()));
        }
        let mut dx = Tensor::zeros(&shape);
        let d = dx.data_mut();
        for (&i, &g) in arg.iter().zip(grad.data()) {
            d[i] += g;
        }
        Ok(dx)
    }
}

/// Bin boundaries `[floor(i*size/bins), floor((i+1)*size/bins))` for each
/// output index; the bins tile `[0, size)` without overlap.
pub fn adaptive_bins(size: usize, bins: usize) -> Result<Vec<(usize, usize)>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("adaptive pooling needs at least one bin".into()));
    }
    if bins > size {
        return Err(Error::InvalidShape(format!(
            "adaptive pooling: {bins} bins exceed spatial extent {size}"
        )));
    }
    Ok((0..bins)
        .map(|i| (i * size / bins, (i + 1) * size / bins))
        .collect())
}

pub fn adaptive_avg_pool2d<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4("adaptive_avg_pool2d")?;
    let rows = adaptive_bins(h, out_h)?;
    let cols = adaptive_bins(w, out_w)?;
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let x = input.data();
    let o = out.data_mut();
    for plane in 0..n * c {
        let p = &x[plane * h * w..(plane + 1) * h * w];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut s = S::zero();
                for r in r0..r1 {
                    for v in &p[r * w + c0..r * w + c1] {
                        s += *v;
                    }
                }
                let count = ((r1 - r0) * (c1 - c0)) as f64;
                o[(plane * out_h + i) * out_w + j] = s / S::lit(count);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
    cached_shape: Option<Vec<usize>>,
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            cached_shape: None,
        }
    }
}

impl<S: Scalar> Layer<S> for AdaptiveAvgPool2d {
    fn forward(&mut self, x: &Tensor<S>, _ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let y = adaptive_avg_pool2d(x, self.out_h, self.out_w)?;
        self.cached_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self
            .cached_shape
            .take()
            .ok_or(Error::BackwardBeforeForward("adaptive_avg_pool2d"))?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if grad.shape() != [n, c, self.out_h, self.out_w] {
            return Err(Error::ShapeMismatch {
                op: "adaptive_avg_pool2d backward",
                expected: vec![n, c, self.out_h, self.out_w],
                got: grad.shape().to_vec(),
            });
        }
        let rows = adaptive_bins(h, self.out_h)?;
        let cols = adaptive_bins(w, self.out_w)?;
        let mut dx = Tensor::zeros(&shape);
        let d = dx.data_mut();
        let g = grad.data();
        for plane in 0..n * c {
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let count = ((r1 - r0) * (c1 - c0)) as f64;
                    let share = g[(plane * self.out_h + i) * self.out_w + j] / S::lit(count);
                    for r in r0..r1 {
                        for v in &mut d[plane * h * w + r * w + c0..plane * h * w + r * w + c1] {
                            *v += share;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}
