//! Dense row-major tensors.
//!
//! Storage is always contiguous; rank-4 tensors that carry images or feature
//! maps are laid out NCHW. All reductions run left to right over the buffer,
//! so results are bitwise reproducible on a given platform.

use std::io::{Read, Write};

use crate::{Error, Precision, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl<S: Scalar> Tensor<S> {
    pub fn full(shape: &[usize], value: S) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {len} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor from `f64` values, rounding to this precision.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        S::PRECISION
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Extents of a rank-4 NCHW tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape(format!(
                "{op}: expected a rank-4 NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(Error::InvalidShape(format!(
                "{op}: expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(S) -> S) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn elementwise(op: BinaryOp, a: &Self, b: &Self) -> Result<Self> {
        match op {
            BinaryOp::Add => a.zip_map(b, "add", |x, y| x + y),
            BinaryOp::Sub => a.zip_map(b, "sub", |x, y| x - y),
            BinaryOp::Mul => a.zip_map(b, "mul", |x, y| x * y),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Mul, self, other)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_inplace(&mut self, factor: S) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Left-to-right sum.
    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Sum of squares accumulated in `f64`, left to right.
    pub fn sum_squares(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            let x = v.as_f64();
            acc += x * x;
        }
        acc
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyInput("stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.check_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::from_vec(&shape, data)
    }

    /// The `index`-th slice along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::InvalidShape("slice_outer on a rank-0 tensor".into()))?;
        if index >= outer {
            return Err(Error::InvalidShape(format!(
                "slice index {index} out of range for leading extent {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Self::from_vec(
            &self.shape[1..],
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }
}

/// Euclidean norm of all elements of all tensors taken together.
pub fn global_l2_norm<S: Scalar>(tensors: &[&Tensor<S>]) -> Result<f64> {
    if tensors.is_empty() {
        return Err(Error::EmptyInput("global_l2_norm"));
    }
    let mut acc = 0.0;
    for t in tensors {
        acc += t.sum_squares();
    }
    Ok(acc.sqrt())
}

pub const MTNS_MAGIC: &[u8; 5] = b"MTNS1";

impl<S: Scalar> Tensor<S> {
    /// Appends the MTNS1 encoding: magic, precision tag, `u32` rank,
    /// `u32` extents, then the little-endian payload.
    pub fn write_mtns(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MTNS_MAGIC);
        out.push(S::PRECISION.tag());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.reserve(self.data.len() * S::PRECISION.byte_width());
        for &v in &self.data {
            v.write_le(out);
        }
    }

    pub fn to_mtns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_mtns(&mut out);
        out
    }

    /// Decodes one MTNS1 tensor from the front of `bytes`, returning it with
    /// the number of bytes consumed.
    pub fn read_mtns(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = ByteCursor::new(bytes, "MTNS1 tensor");
        if cur.take(5)? != MTNS_MAGIC {
            return Err(Error::format("MTNS1 tensor", "bad magic"));
        }
        let tag = cur.u8()?;
        let precision = Precision::from_tag(tag)
            .ok_or_else(|| Error::format("MTNS1 tensor", format!("unknown precision tag {tag}")))?;
        if precision != S::PRECISION {
            return Err(Error::PrecisionMismatch {
                found: precision,
                expected: S::PRECISION,
            });
        }
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("MTNS1 tensor", "extent overflow"))?;
        let width = precision.byte_width();
        let payload = cur.take(len.checked_mul(width).ok_or_else(|| {
            Error::format("MTNS1 tensor", "payload size overflow")
        })?)?;
        let data = payload.chunks_exact(width).map(S::read_le).collect();
        Ok((Self { shape, data }, cur.pos))
    }

    pub fn save_mtns(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&self.to_mtns_bytes())
            .map_err(|e| Error::file(path, e))
    }

    pub fn load_mtns(path: &std::path::Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::file(path, e))?;
        let (t, used) = Self::read_mtns(&buf)?;
        if used != buf.len() {
            return Err(Error::format("MTNS1 tensor", "trailing bytes after payload"));
        }
        Ok(t)
    }
}

/// Bounds-checked little-endian reader shared by the binary formats.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    what: &'static str,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn advance(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_shapes() {
        let z = Tensor::<f64>::full(&[2, 3], 0.0);
        assert_eq!(z.shape(), &[2, 3]);
        assert_eq!(z.data(), &[0.0; 6]);
        assert_eq!(Tensor::<f32>::full(&[1], 1.0).data(), &[1.0]);
        let e = Tensor::<f64>::full(&[0], 5.0);
        assert!(e.is_empty());
        assert_eq!(e.len(), 0);
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(a.mul(&Tensor::ones(&[2])).unwrap(), a);
        assert_eq!(a.add(&Tensor::zeros(&[2])).unwrap(), a);
        assert_eq!(b.sub(&a).unwrap().data(), &[2.0, 2.0]);
        let c = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(a.add(&c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn l2_norm_cases() {
        let t = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(global_l2_norm(&[&t]).unwrap(), 5.0);
        let a = Tensor::<f64>::from_vec(&[1], vec![3.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1], vec![4.0]).unwrap();
        assert_eq!(global_l2_norm(&[&a, &b]).unwrap(), 5.0);
        assert_eq!(global_l2_norm(&[&Tensor::<f64>::zeros(&[3])]).unwrap(), 0.0);
        assert!(global_l2_norm::<f64>(&[]).is_err());
    }

    #[test]
    fn mtns_rejects_bad_input() {
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let bytes = t.to_mtns_bytes();
        assert_eq!(&bytes[..5], b"MTNS1");
        assert_eq!(bytes[5], 4);
        assert!(Tensor::<f32>::read_mtns(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(
            Tensor::<f64>::read_mtns(&bytes),
            Err(Error::PrecisionMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::<f32>::read_mtns(&bad).is_err());
    }

    proptest! {
        #[test]
        fn mtns_roundtrip(shape in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
            let mut rng = crate::Rng::new(seed);
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| rng.normal(0.0, 3.0)).collect();
            let t = Tensor::<f64>::from_vec(&shape, data).unwrap();
            let (back, used) = Tensor::<f64>::read_mtns(&t.to_mtns_bytes()).unwrap();
            prop_assert_eq!(used, t.to_mtns_bytes().len());
            prop_assert_eq!(back, t);
        }

        #[test]
        fn l2_norm_partition_invariant(values in proptest::collection::vec(-100.0f64..100.0, 1..40), cut in 0usize..40) {
            let cut = cut.min(values.len());
            let whole = Tensor::<f64>::from_vec(&[values.len()], values.clone()).unwrap();
            let left = Tensor::<f64>::from_vec(&[cut], values[..cut].to_vec()).unwrap();
            let right = Tensor::<f64>::from_vec(&[values.len() - cut], values[cut..].to_vec()).unwrap();
            let a = global_l2_norm(&[&whole]).unwrap();
            let b = global_l2_norm(&[&left, &right]).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn mul_commutes(values in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
            let a = Tensor::<f64>::from_vec(&[x.len()], x).unwrap();
            let b = Tensor::<f64>::from_vec(&[y.len()], y).unwrap();
            prop_assert_eq!(a.mul(&b).unwrap(), b.mul(&a).unwrap());
        }
    }
}
