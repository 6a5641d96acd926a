//! Dense NCHW tensors.
//!
//! Storage is a flat row-major buffer with the mini-batch index outermost,
//! followed by channel, row and column. Every kernel in the crate is
//! generic over [`Real`] so the same code runs on the 32-bit training path
//! and the 64-bit verification path.

use std::fmt;
use std::io::{Read, Write};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type of a tensor.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const BYTES: usize;

    fn cast_from(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite conversion")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
}

impl Real for f64 {
    const BYTES: usize = 8;
}

/// Shape of a 4-D feature map or weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    /// Element count, or an error when a dimension is zero or the product overflows.
    pub fn checked_len(&self) -> Result<usize> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape(format!("zero dimension in {self}")));
        }
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .ok_or_else(|| Error::shape(format!("element count of {self} overflows")))
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel across the mini-batch.
    pub fn per_channel(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Dims {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Dims { n, c, h, w }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor4D<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor4D")
            .field("dims", &self.dims)
            .field("head", &head)
            .finish()
    }
}

impl<T: Real> Tensor4D<T> {
    pub fn filled(dims: impl Into<Dims>, value: T) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        Ok(Tensor4D { dims, data: vec![value; len] })
    }

    pub fn zeros(dims: impl Into<Dims>) -> Result<Self> {
        Self::filled(dims, T::zero())
    }

    pub fn from_vec(dims: impl Into<Dims>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "{} elements supplied for dims {dims} ({len} expected)",
                data.len()
            )));
        }
        Ok(Tensor4D { dims, data })
    }

    pub(crate) fn zeros_unchecked(dims: Dims) -> Self {
        Tensor4D { dims, data: vec![T::zero(); dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.dims.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.dims.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `h·w` slice for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.dims.c * self.dims.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4D { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor4D<U> {
        Tensor4D {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Order-fixed f64 sum of all elements; used as a cheap checksum.
    pub fn checksum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn approx_eq(&self, other: &Self, rel_tol: f64, abs_tol: f64) -> Result<ApproxReport> {
        approx_eq(self, other, rel_tol, abs_tol)
    }

    /// Debug dump: four little-endian u64 dims followed by little-endian f32 data.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        for d in [self.dims.n, self.dims.c, self.dims.h, self.dims.w] {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut input: impl Read) -> Result<Self> {
        let mut dims = [0usize; 4];
        let mut word = [0u8; 8];
        for d in &mut dims {
            input.read_exact(&mut word)?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::shape("dump dimension exceeds address space"))?;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let len = dims.checked_len()?;
        let mut data = Vec::with_capacity(len);
        let mut f = [0u8; 4];
        for _ in 0..len {
            input.read_exact(&mut f)?;
            data.push(T::cast_from(f32::from_le_bytes(f) as f64));
        }
        Ok(Tensor4D { dims, data })
    }
}

/// Outcome of an element-wise tolerance comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxReport {
    pub equal: bool,
    /// Flat index of the element with the largest excess over its tolerance.
    pub worst_index: usize,
    pub max_abs_diff: f64,
    /// `|a-b| / max(|a|,|b|)` at the worst element (0 when both are 0).
    pub worst_rel_diff: f64,
}

/// Element-wise check of `|a-b| <= abs_tol + rel_tol * max(|a|,|b|)`.
pub fn approx_eq<T: Real>(
    a: &Tensor4D<T>,
    b: &Tensor4D<T>,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<ApproxReport> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("compare {} with {}", a.dims, b.dims)));
    }
    Ok(approx_eq_slices(&a.data, &b.data, rel_tol, abs_tol))
}

pub(crate) fn approx_eq_slices<T: Real>(a: &[T], b: &[T], rel_tol: f64, abs_tol: f64) -> ApproxReport {
    let mut report = ApproxReport { equal: true, worst_index: 0, max_abs_diff: 0.0, worst_rel_diff: 0.0 };
    let mut worst_excess = f64::NEG_INFINITY;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let (x, y) = (x.as_f64(), y.as_f64());
        let diff = (x - y).abs();
        let scale = x.abs().max(y.abs());
        let excess = if diff.is_nan() { f64::INFINITY } else { diff - (abs_tol + rel_tol * scale) };
        if excess > 0.0 {
            report.equal = false;
        }
        report.max_abs_diff = report.max_abs_diff.max(diff);
        if excess > worst_excess {
            worst_excess = excess;
            report.worst_index = i;
            report.worst_rel_diff = if scale > 0.0 { diff / scale } else { 0.0 };
        }
    }
    report
}
