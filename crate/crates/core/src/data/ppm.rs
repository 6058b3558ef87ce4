//! Binary PPM (P6, maxval 255) codec.

use crate::{Error, Result, Scalar, Tensor};

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PPM image", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PPM image", format!("bad {what}")))
}

/// Decodes to `[3, H, W]` with channels scaled to `[0, 1]`.
pub fn decode_ppm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::format("PPM image", "bad magic, expected P6"));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format("PPM image", format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("PPM image", "zero extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format("PPM image", "truncated raster"))?;
    let mut data = vec![S::zero(); need];
    let plane = w * h;
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = S::lit(px[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Encodes a `[3, H, W]` image in `[0, 1]`, rounding to the nearest level.
pub fn encode_ppm<S: Scalar>(img: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::InvalidShape(format!("encode_ppm: expected [3, H, W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::InvalidShape(format!("encode_ppm: expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = img.data();
    for i in 0..plane {
        for ch in 0..3 {
            let v = (d[ch * plane + i].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    Ok(out)
}

pub fn read_ppm<S: Scalar>(path: &std::path::Path) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
