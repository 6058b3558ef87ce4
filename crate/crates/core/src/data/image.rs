//! Per-image transforms on `[3, H, W]` tensors.
//!
//! Bilinear resizing is corner-aligned: output pixel `i` samples source
//! coordinate `i * (H - 1) / (out_h - 1)`, and a single output row or column
//! samples the source centre.

use crate::{Error, Result, Scalar, Tensor};

fn dims3<S: Scalar>(img: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::InvalidShape(format!(
            "{op}: expected a non-empty [C, H, W] image, got {:?}",
            img.shape()
        ))),
    }
}

fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

fn sample_bilinear<S: Scalar>(plane: &[S], h: usize, w: usize, y: f64, x: f64) -> S {
    let y0 = (y.floor().max(0.0) as usize).min(h - 1);
    let x0 = (x.floor().max(0.0) as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = S::lit(y - y0 as f64);
    let fx = S::lit(x - x0 as f64);
    let one = S::one();
    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
    top * (one - fy) + bottom * fy
}

pub fn resize_bilinear<S: Scalar>(img: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (c, h, w) = dims3(img, "resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape("resize_bilinear: output extents must be at least 1".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in img.data().chunks_exact(h * w) {
        for i in 0..out_h {
            let y = source_coord(i, h, out_h);
            for j in 0..out_w {
                out.push(sample_bilinear(plane, h, w, y, source_coord(j, w, out_w)));
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

pub fn crop<S: Scalar>(img: &Tensor<S>, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor<S>> {
    let (c, h, w) = dims3(img, "crop")?;
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(Error::InvalidShape(format!(
            "crop: window {ch}x{cw} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(c * ch * cw);
    for plane in img.data().chunks_exact(h * w) {
        for y in top..top + ch {
            out.extend_from_slice(&plane[y * w + left..y * w + left + cw]);
        }
    }
    Tensor::from_vec(&[c, ch, cw], out)
}

pub fn hflip<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, _, w) = dims3(img, "hflip")?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Rotation about the image centre, counter-clockwise for positive angles.
/// Pixels that map outside the source are black.
pub fn rotate<S: Scalar>(img: &Tensor<S>, degrees: f64) -> Result<Tensor<S>> {
    let (c, h, w) = dims3(img, "rotate")?;
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![S::zero(); c * h * w];
    for (plane, dst) in img.data().chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                // inverse map: rotate the destination offset back into the source
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                    continue;
                }
                dst[i * w + j] = sample_bilinear(plane, h, w, sy.clamp(0.0, h as f64 - 1.0), sx.clamp(0.0, w as f64 - 1.0));
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn clamp01<S: Scalar>(v: S) -> S {
    v.max(S::zero()).min(S::one())
}

fn grayscale<S: Scalar>(r: S, g: S, b: S) -> S {
    S::lit(0.299) * r + S::lit(0.587) * g + S::lit(0.114) * b
}

fn rgb_planes<S: Scalar>(img: &Tensor<S>, op: &'static str) -> Result<usize> {
    let (c, h, w) = dims3(img, op)?;
    if c != 3 {
        return Err(Error::InvalidShape(format!("{op}: expected 3 channels, got {c}")));
    }
    Ok(h * w)
}

pub fn adjust_brightness<S: Scalar>(img: &Tensor<S>, factor: f64) -> Tensor<S> {
    let f = S::lit(factor);
    img.map(|v| clamp01(v * f))
}

/// Blends towards the mean grayscale level of the whole image.
pub fn adjust_contrast<S: Scalar>(img: &Tensor<S>, factor: f64) -> Result<Tensor<S>> {
    let plane = rgb_planes(img, "adjust_contrast")?;
    let d = img.data();
    let mut acc = 0.0;
    for p in 0..plane {
        acc += grayscale(d[p], d[plane + p], d[2 * plane + p]).as_f64();
    }
    let mean = S::lit(acc / plane as f64);
    let f = S::lit(factor);
    Ok(img.map(|v| clamp01((v - mean) * f + mean)))
}

pub fn adjust_saturation<S: Scalar>(img: &Tensor<S>, factor: f64) -> Result<Tensor<S>> {
    let plane = rgb_planes(img, "adjust_saturation")?;
    let f = S::lit(factor);
    let mut out = img.clone();
    let d = out.data_mut();
    for p in 0..plane {
        let gray = grayscale(d[p], d[plane + p], d[2 * plane + p]);
        for c in 0..3 {
            let v = &mut d[c * plane + p];
            *v = clamp01(gray + (*v - gray) * f);
        }
    }
    Ok(out)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns of the hue circle.
pub fn adjust_hue<S: Scalar>(img: &Tensor<S>, shift: f64) -> Result<Tensor<S>> {
    let plane = rgb_planes(img, "adjust_hue")?;
    if shift == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    let d = out.data_mut();
    for p in 0..plane {
        let (h, s, v) = rgb_to_hsv(d[p].as_f64(), d[plane + p].as_f64(), d[2 * plane + p].as_f64());
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        d[p] = clamp01(S::lit(r));
        d[plane + p] = clamp01(S::lit(g));
        d[2 * plane + p] = clamp01(S::lit(b));
    }
    Ok(out)
}

/// Per-channel `(x - mean[c]) / std[c]`.
pub fn normalize_channels<S: Scalar>(img: &Tensor<S>, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor<S>> {
    let plane = rgb_planes(img, "normalize_image")?;
    let mut out = img.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let m = S::lit(mean[c]);
        let inv = S::lit(1.0 / std[c]);
        for v in chunk {
            *v = (*v - m) * inv;
        }
    }
    Ok(out)
}
