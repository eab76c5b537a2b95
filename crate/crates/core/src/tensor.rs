//! Dense row-major tensors and the tape-free kernels behind every op.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Dense N-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d).ok_or_else(|| Error::Size(format!("extent product of {shape:?} overflows")))
    })
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape)?;
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape)?;
        Ok(Self { shape, data: vec![value; n] })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Gaussian samples drawn from `rng` by Box–Muller.
    pub fn randn(shape: impl Into<Vec<usize>>, mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape)?;
        let data = (0..n).map(|_| T::lit(mean + std * rng.normal())).collect();
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape)?;
        let data = (0..n).map(|_| T::lit(rng.range(lo, hi))).collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => shape_err(format!("item() on tensor of shape {:?}", self.shape)),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    // ---- layout ----

    /// Relabels the row-major buffer with a new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape)? != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn flatten(&self) -> Self {
        Self { shape: vec![self.data.len()], data: self.data.clone() }
    }

    /// Swaps two axes, permuting the data.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        let nd = self.ndim();
        if a >= nd || b >= nd {
            return shape_err(format!("transpose axes ({a},{b}) out of range for {:?}", self.shape));
        }
        if a == b {
            return Ok(self.clone());
        }
        let (a, b) = (a.min(b), a.max(b));
        let outer: usize = self.shape[..a].iter().product();
        let da = self.shape[a];
        let mid: usize = self.shape[a + 1..b].iter().product();
        let db = self.shape[b];
        let inner: usize = self.shape[b + 1..].iter().product();
        let mut out = Vec::with_capacity(self.data.len());
        // output index order: outer, db, mid, da, inner
        for o in 0..outer {
            for j in 0..db {
                for m in 0..mid {
                    for i in 0..da {
                        let base = (((o * da + i) * mid + m) * db + j) * inner;
                        out.extend_from_slice(&self.data[base..base + inner]);
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(a, b);
        Ok(Self { shape, data: out })
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return shape_err(format!("t() needs a matrix, got {:?}", self.shape));
        }
        self.transpose(0, 1)
    }

    /// Concatenates along axis 1 (channels of an NCHW tensor).
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if first.ndim() < 2 {
            return shape_err("concat_channels needs rank >= 2");
        }
        let n = first.shape[0];
        let rest = &first.shape[2..];
        let mut channels = 0;
        for p in parts {
            if p.ndim() != first.ndim() || p.shape[0] != n || &p.shape[2..] != rest {
                return shape_err(format!("concat_channels: {:?} vs {:?}", first.shape, p.shape));
            }
            channels += p.shape[1];
        }
        let inner: usize = rest.iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for p in parts {
                let block = p.shape[1] * inner;
                data.extend_from_slice(&p.data[s * block..(s + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = channels;
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits axis 1 into the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        if self.ndim() < 2 || widths.iter().sum::<usize>() != self.shape[1] {
            return shape_err(format!("split_channels {widths:?} of {:?}", self.shape));
        }
        let n = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(n * w * inner)).collect();
        for s in 0..n {
            let mut off = s * self.shape[1] * inner;
            for (w, out) in widths.iter().zip(outs.iter_mut()) {
                out.extend_from_slice(&self.data[off..off + w * inner]);
                off += w * inner;
            }
        }
        Ok(widths
            .iter()
            .zip(outs)
            .map(|(&w, data)| {
                let mut shape = self.shape.clone();
                shape[1] = w;
                Self { shape, data }
            })
            .collect())
    }

    // ---- arithmetic ----

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&self, alpha: T) -> Self {
        self.map(|v| if v > T::zero() { v } else { alpha * v })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(|v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&self) -> Self {
        self.map(|v| v.tanh())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Adds `b` (shape `s`) to every leading-axis slice of `a` (shape `[N, ..s]`).
    pub fn add_per_sample(&self, b: &Self) -> Result<Self> {
        if self.ndim() != b.ndim() + 1 || self.shape[1..] != b.shape[..] {
            return shape_err(format!("add_per_sample {:?} + {:?}", self.shape, b.shape));
        }
        let block = b.len();
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(block.max(1)) {
            for (a, &v) in chunk.iter_mut().zip(&b.data) {
                *a += v;
            }
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return shape_err(format!("matmul {:?} x {:?}", self.shape, other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.data, k as isize, 1, &other.data, n as isize, 1, T::zero(), &mut out, n as isize, 1);
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Max-stabilised softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Self> {
        let width = *self.shape.last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut data = self.data.clone();
        if width == 0 {
            return Ok(Self { shape: self.shape.clone(), data });
        }
        for row in data.chunks_mut(width) {
            softmax_row(row);
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> Self {
        Self::scalar(self.data.iter().copied().sum())
    }

    pub fn mean(&self) -> Result<Self> {
        if self.data.is_empty() {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let n = T::from_usize(self.data.len()).expect("count representable");
        Ok(Self::scalar(self.data.iter().copied().sum::<T>() / n))
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
