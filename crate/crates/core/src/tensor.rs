//! Dense channel-major tensors.
//!
//! A rank-3 tensor is laid out as `(channels, height, width)` with each
//! channel stored row-major. Every patch vector in the crate inherits this
//! order: channel first, then row, then column.

use crate::error::{Error, Result};

/// Dense `f32` tensor. Dimensions are never zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("rank-0 tensors are not supported"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "dimension {axis} of {shape:?} is zero"
        )));
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows usize")))?;
    if expected != len {
        return Err(Error::shape(format!(
            "shape {shape:?} needs {expected} elements, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, a length that
    /// disagrees with the shape, and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Shape-checked constructor for buffers produced by this crate's own
    /// kernels. Finiteness is the caller's responsibility.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let len = shape.iter().product();
        if !value.is_finite() {
            return Err(Error::NonFinite("Tensor::full".into()));
        }
        Self::from_raw(shape, vec![value; len])
    }

    pub fn from_fn3(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self::new(vec![c, h, w], data)
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

    /// Always false; tensors with zero elements cannot be constructed.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a (C, H, W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a (rows, cols) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element of a rank-3 tensor. Panics when out of range.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Contiguous slice of channel `c` in a rank-3 tensor.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub(crate) fn finite_or(self, op: &str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )?
        .finite_or("map")
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_raw(self.shape.clone(), data)?.finite_or(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f32) -> Result<Self> {
        self.map(|v| v * k)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Self> {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Multiplies every channel of a `(C, H, W)` tensor by a `(1, H, W)` map.
    pub fn mul_broadcast_channels(&self, map: &Tensor) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        let (mc, mh, mw) = map.dims3()?;
        if mc != 1 || mh != h || mw != w {
            return Err(Error::shape(format!(
                "broadcast map {:?} does not fit tensor {:?}",
                map.shape, self.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.data.len());
        for ci in 0..c {
            let src = &self.data[ci * plane..(ci + 1) * plane];
            data.extend(src.iter().zip(&map.data).map(|(&a, &m)| a * m));
        }
        Tensor::from_raw(self.shape.clone(), data)?.finite_or("mul_broadcast_channels")
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (_, h, w) = first.dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat: spatial dims {ph}x{pw} differ from {h}x{w}"
                )));
            }
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_raw(vec![channels, h, w], data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Dense tensor of non-negative integer indices (hard-attention planes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTensor {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl IndexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(IndexTensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[usize] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn channel_major_indexing() {
        let t = Tensor::from_fn3(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f32).unwrap();
        assert_eq!(t.at3(1, 2, 3), 123.0);
        assert_eq!(t.data()[12], 100.0);
        assert_eq!(t.channel(1)[0], 100.0);
    }

    #[test]
    fn broadcast_and_concat() {
        let a = Tensor::full(vec![2, 2, 2], 3.0).unwrap();
        let m = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = a.mul_broadcast_channels(&m).unwrap();
        assert_eq!(p.channel(1), &[0.0, 3.0, 6.0, 9.0]);
        let cat = Tensor::concat_channels(&[&a, &m]).unwrap();
        assert_eq!(cat.shape(), &[3, 2, 2]);
        assert_eq!(cat.channel(2), m.data());
    }

    #[test]
    fn overflowing_arithmetic_is_reported() {
        let a = Tensor::full(vec![1], f32::MAX).unwrap();
        assert!(matches!(a.add(&a), Err(Error::NonFinite(_))));
    }
}
