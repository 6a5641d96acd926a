//! Channel-concatenated views over shared tensors.
//!
//! A [`FeatureMap`] is a list of channel ranges taken from reference-counted
//! tensors. Concat in view mode and Split forward both produce feature maps
//! without copying; kernels read them plane by plane.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor4D};

#[derive(Debug, Clone)]
struct Segment<T> {
    base: Arc<Tensor4D<T>>,
    c0: usize,
    c: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    dims: Dims,
    segments: Vec<Segment<T>>,
}

impl<T: Real> FeatureMap<T> {
    pub fn dense(t: Tensor4D<T>) -> Self {
        Self::shared(Arc::new(t))
    }

    pub fn shared(t: Arc<Tensor4D<T>>) -> Self {
        let dims = t.dims();
        FeatureMap { dims, segments: vec![Segment { base: t, c0: 0, c: dims.c }] }
    }

    /// Zero-copy channel concatenation.
    pub fn concat(parts: &[&FeatureMap<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero inputs"))?;
        let d0 = first.dims;
        let mut segments = Vec::new();
        let mut c = 0;
        for p in parts {
            let d = p.dims;
            if (d.n, d.h, d.w) != (d0.n, d0.h, d0.w) {
                return Err(Error::shape(format!("concat inputs {d0} and {d} differ outside channels")));
            }
            c += d.c;
            segments.extend(p.segments.iter().cloned());
        }
        Ok(FeatureMap { dims: d0.with_c(c), segments })
    }

    /// Channels `[c0, c0 + c)` as a zero-copy view.
    pub fn slice_channels(&self, c0: usize, c: usize) -> Result<Self> {
        if c == 0 || c0 + c > self.dims.c {
            return Err(Error::shape(format!("channel slice {c0}+{c} of {}", self.dims)));
        }
        let mut out = Vec::new();
        let mut at = 0;
        for s in &self.segments {
            let lo = c0.max(at);
            let hi = (c0 + c).min(at + s.c);
            if lo < hi {
                out.push(Segment { base: s.base.clone(), c0: s.c0 + (lo - at), c: hi - lo });
            }
            at += s.c;
        }
        Ok(FeatureMap { dims: self.dims.with_c(c), segments: out })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn is_view(&self) -> bool {
        !(self.segments.len() == 1 && self.segments[0].c0 == 0 && self.segments[0].c == self.segments[0].base.dims().c)
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let mut c = c;
        for s in &self.segments {
            if c < s.c {
                return s.base.plane(n, s.c0 + c);
            }
            c -= s.c;
        }
        panic!("channel index out of range for {}", self.dims)
    }

    /// Copies into a freshly allocated dense tensor.
    pub fn to_tensor(&self) -> Tensor4D<T> {
        if !self.is_view() {
            return (*self.segments[0].base).clone();
        }
        let mut out = Tensor4D::zeros_unchecked(self.dims);
        for n in 0..self.dims.n {
            for c in 0..self.dims.c {
                out.plane_mut(n, c).copy_from_slice(self.plane(n, c));
            }
        }
        out
    }

    /// The backing tensor when this map is a single whole tensor.
    pub fn as_dense(&self) -> Option<&Arc<Tensor4D<T>>> {
        (!self.is_view()).then(|| &self.segments[0].base)
    }

    pub fn into_tensor(self) -> Tensor4D<T> {
        if !self.is_view() {
            let seg = self.segments.into_iter().next().expect("one segment");
            return Arc::try_unwrap(seg.base).unwrap_or_else(|a| (*a).clone());
        }
        self.to_tensor()
    }

    /// True when both maps read the same memory (pointer passing).
    pub fn same_storage(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| Arc::ptr_eq(&a.base, &b.base) && a.c0 == b.c0 && a.c == b.c)
    }
}

impl<T: Real> From<Tensor4D<T>> for FeatureMap<T> {
    fn from(t: Tensor4D<T>) -> Self {
        FeatureMap::dense(t)
    }
}
