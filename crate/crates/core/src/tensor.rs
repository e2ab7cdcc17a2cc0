//! Dense row-major tensors and the forward kernels shared by the autodiff
//! graph.
//!
//! Broadcasting is limited to a leading batch dimension: a rank-1 tensor of
//! width `n` can be added to every row of a `[b, n]` tensor, a per-channel
//! bias to every `[c, h, w]` slab of a `[b, c, h, w]` tensor, and nothing
//! else. Any other mismatch is a [`Error::Dimension`].

use std::fmt::Debug;
use std::iter::Sum;

use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

use crate::error::{Error, Result};

/// Floating point element type. Training runs on `f32`, gradient checks on
/// `f64`.
pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Debug + Default + Sum + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts")
    }
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("float converts to f64")
    }
    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize converts")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.contains(&0) && !values.is_empty() {
            return Err(Error::dim("tensor", &shape, &[values.len()]));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a scalar or single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values: self.values.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn zip_same(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_same(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_same(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_same(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Self {
        self.map(T::exp)
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(v) = self.values.iter().find(|&&v| v.is_nan() || v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v:?}"),
            });
        }
        Ok(self.map(T::ln))
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn mean(&self) -> Result<T> {
        if self.values.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        Ok(self.sum() / T::of_usize(self.values.len()))
    }

    /// Adds a rank-1 `bias` to the last axis of a rank-1 or rank-2 tensor.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let width = *self.shape.last().unwrap_or(&0);
        if bias.rank() != 1 || self.rank() == 0 || self.rank() > 2 || bias.shape[0] != width {
            return Err(Error::dim("add_row_bias", &self.shape, &bias.shape));
        }
        let mut out = self.values.clone();
        for row in out.chunks_mut(width) {
            for (o, &b) in row.iter_mut().zip(&bias.values) {
                *o += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            values: out,
        })
    }

    /// Adds one bias per channel to a `[c,h,w]` or `[b,c,h,w]` tensor.
    pub fn add_channel_bias(&self, bias: &Self) -> Result<Self> {
        let (_, c, h, w) =
            image_dims(&self.shape).ok_or_else(|| Error::dim("add_channel_bias", &self.shape, &bias.shape))?;
        if bias.rank() != 1 || bias.shape[0] != c {
            return Err(Error::dim("add_channel_bias", &self.shape, &bias.shape));
        }
        let mut out = self.values.clone();
        for slab in out.chunks_mut(c * h * w) {
            for (plane, &b) in slab.chunks_mut(h * w).zip(&bias.values) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            values: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.shape[..] else {
            return Err(Error::dim("transpose", &self.shape, &[]));
        };
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.values[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

/// `C = A·B` for `A: [m,k]`, `B: [k,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    };
    let (m, k, n) = (*m, *k, *n);
    if k != *k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a.values[i * k + t];
            let brow = &b.values[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Splits an image shape into `(batch, channels, height, width)`; a rank-3
/// shape is a batch of one.
pub(crate) fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h, w)),
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

/// Geometry of one convolution, shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let err = || Error::dim("conv2d", x, k);
        let (batch, c_in, h, w) = image_dims(x).ok_or_else(err)?;
        let [c_out, kc, kh, kw] = *k else {
            return Err(err());
        };
        if kc != c_in || stride == 0 || kh == 0 || kw == 0 {
            return Err(err());
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(err());
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.out_h, self.out_w]
        } else {
            vec![self.c_out, self.out_h, self.out_w]
        }
    }

    /// Calls `f(x_index, k_index, out_index)` for every multiply-accumulate
    /// term that lands inside the unpadded input.
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        for b in 0..self.batch {
            for co in 0..self.c_out {
                for oy in 0..self.out_h {
                    for ox in 0..self.out_w {
                        let o = ((b * self.c_out + co) * self.out_h + oy) * self.out_w + ox;
                        for ci in 0..self.c_in {
                            for ky in 0..self.kh {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for kx in 0..self.kw {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    let xi = ((b * self.c_in + ci) * self.h + iy as usize) * self.w + ix as usize;
                                    let ki = ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx;
                                    f(xi, ki, o);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [c_in,h,w]` (or a batch `[b,c_in,h,w]`) with
/// `k: [c_out,c_in,kh,kw]`. Out-of-range taps read zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
    let mut out = vec![T::zero(); g.batch * g.c_out * g.out_h * g.out_w];
    g.for_each_tap(|xi, ki, o| out[o] += x.values[xi] * k.values[ki]);
    Tensor::new(g.out_shape(x.rank() == 4), out)
}

fn row_width(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape {
        [c] | [_, c] if *c > 0 => Ok(*c),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

/// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor,
/// computed max-shifted.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let c = row_width(z.shape(), "softmax")?;
    let mut out = Vec::with_capacity(z.len());
    for row in z.values().chunks(c) {
        let m = row.iter().copied().fold(row[0], T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Row-wise `log(softmax(z))`, evaluated as `z - max - log(sum(exp(z - max)))`.
pub fn log_softmax<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let c = row_width(z.shape(), "log_softmax")?;
    let mut out = Vec::with_capacity(z.len());
    for row in z.values().chunks(c) {
        let m = row.iter().copied().fold(row[0], T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
