use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{join_name, kaiming_uniform, Ctx, Layer, Parameter};
use crate::{Error, Result, Rng, Scalar, Tensor};

/// Output extent of a convolution or pooling window along one axis:
/// `floor((size + 2*pad - kernel) / stride) + 1`.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidConfig("kernel and stride must be positive".into()));
    }
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::InvalidShape(format!(
            "window {kernel} exceeds padded extent {padded} (size {size}, pad {pad})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn check_dims<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    g: ConvGeometry,
) -> Result<Dims> {
    let (n, cin, h, w) = input.dims4("conv2d input")?;
    let (cout, cin_g, kh, kw) = weight.dims4("conv2d weight")?;
    if g.groups == 0 || cin % g.groups != 0 || cout % g.groups != 0 {
        return Err(Error::InvalidConfig(format!(
            "conv2d: channels in={cin} out={cout} not divisible by groups={}",
            g.groups
        )));
    }
    if cin / g.groups != cin_g {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![cout, cin / g.groups, kh, kw],
            got: weight.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![cout],
                got: b.shape().to_vec(),
            });
        }
    }
    let ho = conv_out_extent(h, kh, g.stride, g.padding)?;
    let wo = conv_out_extent(w, kw, g.stride, g.padding)?;
    Ok(Dims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
        cin_g,
        cout_g: cout / g.groups,
    })
}

impl Dims {
    fn pointwise(&self, g: ConvGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }

    fn depthwise(&self) -> bool {
        self.cin_g == 1
    }
}

/// Half-open range of output columns whose input column `o*stride + k - pad`
/// stays inside `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad < size
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<S: Scalar>(x: &[S], d: &Dims, g: ConvGeometry, cols: &mut [S]) {
    let hw = d.ho * d.wo;
    for c in 0..d.cin_g {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                dst.fill(S::zero());
                let (xlo, xhi) = valid_range(d.wo, d.w, kx, g.stride, g.padding);
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..];
                    for ox in xlo..xhi {
                        dst[oy * d.wo + ox] = src[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], d: &Dims, g: ConvGeometry, dx: &mut [S]) {
    let hw = d.ho * d.wo;
    for c in 0..d.cin_g {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (xlo, xhi) = valid_range(d.wo, d.w, kx, g.stride, g.padding);
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kx - g.padding] += src[oy * d.wo + ox];
                    }
                }
            }
        }
    }
}

/// Direct per-channel filtering used when every group has one input channel.
fn depthwise_plane<S: Scalar>(x: &[S], k: &[S], d: &Dims, g: ConvGeometry, out: &mut [S]) {
    for oy in 0..d.ho {
        let orow = &mut out[oy * d.wo..(oy + 1) * d.wo];
        for ky in 0..d.kh {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            if iy < 0 || iy as usize >= d.h {
                continue;
            }
            let irow = &x[iy as usize * d.w..(iy as usize + 1) * d.w];
            for kx in 0..d.kw {
                let wv = k[ky * d.kw + kx];
                let (lo, hi) = valid_range(d.wo, d.w, kx, g.stride, g.padding);
                if g.stride == 1 {
                    let base = kx as isize - g.padding as isize;
                    let src = &irow[(lo as isize + base) as usize..(hi as isize + base) as usize];
                    for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                        *o += wv * v;
                    }
                } else {
                    for ox in lo..hi {
                        orow[ox] += wv * irow[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
}

fn depthwise_plane_backward<S: Scalar>(
    x: &[S],
    k: &[S],
    dy: &[S],
    d: &Dims,
    g: ConvGeometry,
    dx: &mut [S],
    dk: &mut [S],
) {
    for ky in 0..d.kh {
        for kx in 0..d.kw {
            let wv = k[ky * d.kw + kx];
            let (lo, hi) = valid_range(d.wo, d.w, kx, g.stride, g.padding);
            let mut acc = S::zero();
            for oy in 0..d.ho {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy as usize >= d.h {
                    continue;
                }
                let row = iy as usize * d.w;
                for ox in lo..hi {
                    let ix = row + ox * g.stride + kx - g.padding;
                    let gy = dy[oy * d.wo + ox];
                    acc += gy * x[ix];
                    dx[ix] += wv * gy;
                }
            }
            dk[ky * d.kw + kx] += acc;
        }
    }
}

/// Cross-correlation of an NCHW batch with `weight[Cout, Cin/groups, kH, kW]`.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let d = check_dims(input, weight, bias, geom)?;
    let hw = d.ho * d.wo;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.ho, d.wo]);
    let x = input.data();
    let wt = weight.data();
    let k_len = d.cin_g * d.kh * d.kw;
    let mut cols = if d.pointwise(geom) || d.depthwise() {
        Vec::new()
    } else {
        vec![S::zero(); k_len * hw]
    };
    let out_data = out.data_mut();
    for ni in 0..d.n {
        for gi in 0..geom.groups {
            let xin = &x[(ni * d.cin + gi * d.cin_g) * d.h * d.w..][..d.cin_g * d.h * d.w];
            let wg = &wt[gi * d.cout_g * k_len..(gi + 1) * d.cout_g * k_len];
            let og = &mut out_data[(ni * d.cout + gi * d.cout_g) * hw..][..d.cout_g * hw];
            if let Some(b) = bias {
                for (o, plane) in og.chunks_mut(hw).enumerate() {
                    plane.fill(b.data()[gi * d.cout_g + o]);
                }
            }
            if d.depthwise() {
                for (o, plane) in og.chunks_mut(hw).enumerate() {
                    depthwise_plane(xin, &wg[o * k_len..(o + 1) * k_len], &d, geom, plane);
                }
            } else if d.pointwise(geom) {
                gemm_nn(d.cout_g, k_len, hw, wg, xin, og);
            } else {
                im2col(xin, &d, geom, &mut cols);
                gemm_nn(d.cout_g, k_len, hw, wg, &cols, og);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]: `(d input, d weight, d bias)`.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    geom: ConvGeometry,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = check_dims(input, weight, None, geom)?;
    if grad_out.shape() != [d.n, d.cout, d.ho, d.wo] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            expected: vec![d.n, d.cout, d.ho, d.wo],
            got: grad_out.shape().to_vec(),
        });
    }
    let hw = d.ho * d.wo;
    let k_len = d.cin_g * d.kh * d.kw;
    let mut dx = Tensor::zeros_like(input);
    let mut dw = Tensor::zeros_like(weight);
    let mut db = Tensor::zeros(&[d.cout]);
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();
    let mut cols = if d.pointwise(geom) || d.depthwise() {
        Vec::new()
    } else {
        vec![S::zero(); k_len * hw]
    };
    let mut dcols = cols.clone();
    for ni in 0..d.n {
        for gi in 0..geom.groups {
            let xoff = (ni * d.cin + gi * d.cin_g) * d.h * d.w;
            let xin = &x[xoff..xoff + d.cin_g * d.h * d.w];
            let wg = &wt[gi * d.cout_g * k_len..(gi + 1) * d.cout_g * k_len];
            let dyg = &dy[(ni * d.cout + gi * d.cout_g) * hw..][..d.cout_g * hw];
            for (o, plane) in dyg.chunks(hw).enumerate() {
                let mut s = S::zero();
                for &v in plane {
                    s += v;
                }
                db.data_mut()[gi * d.cout_g + o] += s;
            }
            let dwg = &mut dw.data_mut()[gi * d.cout_g * k_len..(gi + 1) * d.cout_g * k_len];
            let dxg = &mut dx.data_mut()[xoff..xoff + d.cin_g * d.h * d.w];
            if d.depthwise() {
                for (o, plane) in dyg.chunks(hw).enumerate() {
                    depthwise_plane_backward(
                        xin,
                        &wg[o * k_len..(o + 1) * k_len],
                        plane,
                        &d,
                        geom,
                        dxg,
                        &mut dwg[o * k_len..(o + 1) * k_len],
                    );
                }
            } else if d.pointwise(geom) {
                gemm_nt(d.cout_g, hw, k_len, dyg, xin, dwg);
                gemm_tn(k_len, d.cout_g, hw, wg, dyg, dxg);
            } else {
                im2col(xin, &d, geom, &mut cols);
                gemm_nt(d.cout_g, hw, k_len, dyg, &cols, dwg);
                dcols.fill(S::zero());
                gemm_tn(k_len, d.cout_g, hw, wg, dyg, &mut dcols);
                col2im(&dcols, &d, geom, dxg);
            }
        }
    }
    Ok((dx, dw, db))
}

/// Convolution layer holding its weights, optional bias and geometry.
#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub weight: Parameter<S>,
    pub bias: Option<Parameter<S>>,
    pub geom: ConvGeometry,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Conv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::InvalidConfig(format!(
                "{name}: channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidConfig(format!("{name}: kernel and stride must be positive")));
        }
        let cin_g = in_channels / groups;
        let fan_in = cin_g * kernel * kernel;
        let w = kaiming_uniform(&[out_channels, cin_g, kernel, kernel], fan_in, rng);
        Ok(Self {
            weight: Parameter::new(join_name(name, "weight"), w, true),
            bias: bias.then(|| {
                Parameter::new(join_name(name, "bias"), Tensor::zeros(&[out_channels]), false)
            }),
            geom: ConvGeometry {
                stride,
                padding,
                groups,
            },
            cached_input: None,
        })
    }

    pub fn from_parts(weight: Parameter<S>, bias: Option<Parameter<S>>, geom: ConvGeometry) -> Self {
        Self {
            weight,
            bias,
            geom,
            cached_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<S: Scalar> Layer<S> for Conv2d<S> {
    fn forward(&mut self, x: &Tensor<S>, _ctx: &mut Ctx<'_>) -> Result<Tensor<S>> {
        let y = conv2d_forward(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), self.geom)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self
            .cached_input
            .take()
            .ok_or(Error::BackwardBeforeForward("conv2d"))?;
        let (dx, dw, db) = conv2d_backward(&x, &self.weight.value, grad, self.geom)?;
        self.weight.accumulate(dw.data());
        if let Some(b) = &mut self.bias {
            b.accumulate(db.data());
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Parameter<S>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight six-loop reference, independent of im2col and the depthwise path.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4("x").unwrap();
        let (cout, cin_g, kh, kw) = w.dims4("w").unwrap();
        let ho = (h + 2 * g.padding - kh) / g.stride + 1;
        let wo = (wd + 2 * g.padding - kw) / g.stride + 1;
        let cout_g = cout / g.groups;
        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for o in 0..cout {
                let grp = o / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.map_or(0.0, |b| b.data()[o]);
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((ni * cin + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * cin_g + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * cout + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, cout, ho, wo], out).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn hand_convolution() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let g = ConvGeometry { stride: 1, padding: 1, groups: 1 };
        let y = conv2d_forward(&x, &w, None, g).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn unit_pointwise_is_identity() {
        let mut rng = Rng::new(1);
        let x = random(&[2, 1, 5, 4], &mut rng);
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let b = Tensor::<f64>::zeros(&[1]);
        let g = ConvGeometry { stride: 1, padding: 0, groups: 1 };
        assert_eq!(conv2d_forward(&x, &w, Some(&b), g).unwrap(), x);
    }

    #[test]
    fn output_extents() {
        assert_eq!(conv_out_extent(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(conv_out_extent(56, 3, 2, 1).unwrap(), 28);
        assert_eq!(conv_out_extent(112, 3, 2, 1).unwrap(), 56);
        assert!(conv_out_extent(2, 7, 1, 1).is_err());
    }

    #[test]
    fn dirac_depthwise_is_identity() {
        let mut rng = Rng::new(2);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 9 + 4] = 1.0;
        }
        let g = ConvGeometry { stride: 1, padding: 1, groups: 3 };
        assert_eq!(conv2d_forward(&x, &w, None, g).unwrap(), x);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let mut rng = Rng::new(3);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        w.data_mut()[9 + 4] = 1.0;
        let g = ConvGeometry { stride: 1, padding: 1, groups: 2 };
        let y = conv2d_forward(&x, &w, None, g).unwrap();
        assert!(y.data()[..25].iter().all(|&v| v == 0.0));
        assert_eq!(&y.data()[25..], &x.data()[25..]);
    }

    #[test]
    fn depthwise_stride_two_shape() {
        let x = Tensor::<f32>::zeros(&[1, 4, 56, 56]);
        let w = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
        let g = ConvGeometry { stride: 2, padding: 1, groups: 4 };
        assert_eq!(conv2d_forward(&x, &w, None, g).unwrap().shape(), &[1, 4, 28, 28]);
    }

    #[test]
    fn matches_reference_over_configurations() {
        let mut rng = Rng::new(4);
        let cases = [
            // (cin, cout, k, stride, pad, groups, h, w)
            (3, 4, 7, 2, 3, 1, 11, 9),
            (4, 6, 3, 1, 1, 2, 5, 6),
            (5, 5, 3, 2, 1, 5, 7, 7),
            (4, 8, 3, 1, 1, 4, 6, 5),
            (6, 3, 1, 1, 0, 1, 4, 4),
            (2, 3, 1, 2, 0, 1, 5, 5),
            (3, 2, 2, 3, 0, 1, 8, 7),
        ];
        for &(cin, cout, k, s, p, grp, h, w) in &cases {
            let x = random(&[2, cin, h, w], &mut rng);
            let wt = random(&[cout, cin / grp, k, k], &mut rng);
            let b = random(&[cout], &mut rng);
            let g = ConvGeometry { stride: s, padding: p, groups: grp };
            let got = conv2d_forward(&x, &wt, Some(&b), g).unwrap();
            let want = reference(&x, &wt, Some(&b), g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} in case {:?}", (cin, cout, k, s, p, grp));
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let g = ConvGeometry { stride: 1, padding: 1, groups: 1 };
        assert!(conv2d_forward(&x, &w, None, g).is_err());
        let g2 = ConvGeometry { stride: 1, padding: 1, groups: 2 };
        assert!(conv2d_forward(&x, &w, None, g2).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let mut rng = Rng::new(0);
        let mut c = Conv2d::<f64>::new("c", 2, 2, 3, 1, 1, 1, false, &mut rng).unwrap();
        assert!(matches!(
            c.backward(&Tensor::zeros(&[1, 2, 3, 3])),
            Err(Error::BackwardBeforeForward(_))
        ));
    }
}
