//! Concat and Split: channel layout layers of dense connectivity.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fmap::FeatureMap;
use crate::sweep::{Operand, PassLog};
use crate::tensor::{Dims, Real, Tensor4D};

/// Plane-wise read access shared by dense tensors and channel views.
pub trait Planes<T> {
    fn dims(&self) -> Dims;
    fn plane(&self, n: usize, c: usize) -> &[T];
}

impl<T: Real> Planes<T> for Tensor4D<T> {
    fn dims(&self) -> Dims {
        Tensor4D::dims(self)
    }
    fn plane(&self, n: usize, c: usize) -> &[T] {
        Tensor4D::plane(self, n, c)
    }
}

impl<T: Real> Planes<T> for FeatureMap<T> {
    fn dims(&self) -> Dims {
        FeatureMap::dims(self)
    }
    fn plane(&self, n: usize, c: usize) -> &[T] {
        FeatureMap::plane(self, n, c)
    }
}

impl<T: Real> Planes<T> for Arc<Tensor4D<T>> {
    fn dims(&self) -> Dims {
        Tensor4D::dims(self)
    }
    fn plane(&self, n: usize, c: usize) -> &[T] {
        Tensor4D::plane(self, n, c)
    }
}

pub(crate) fn same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Channel concatenation. `physical` copies into a new tensor; otherwise the
/// result is a zero-copy view with identical reads.
pub fn concat_fwd<T: Real>(xs: &[&FeatureMap<T>], physical: bool) -> Result<FeatureMap<T>> {
    concat_fwd_logged(xs, physical, &mut PassLog::new())
}

pub(crate) fn concat_fwd_logged<T: Real>(
    xs: &[&FeatureMap<T>],
    physical: bool,
    log: &mut PassLog,
) -> Result<FeatureMap<T>> {
    let view = FeatureMap::concat(xs)?;
    if !physical {
        return Ok(view);
    }
    for i in 0..xs.len() {
        log.read(Operand::Input(i));
    }
    log.write(Operand::Output(0));
    Ok(FeatureMap::dense(view.to_tensor()))
}

/// Gradient of concat: the output gradient cut back into per-input channel ranges.
pub fn concat_bwd<T: Real>(dy: &FeatureMap<T>, channels: &[usize], physical: bool) -> Result<Vec<FeatureMap<T>>> {
    concat_bwd_logged(dy, channels, physical, &mut PassLog::new())
}

pub(crate) fn concat_bwd_logged<T: Real>(
    dy: &FeatureMap<T>,
    channels: &[usize],
    physical: bool,
    log: &mut PassLog,
) -> Result<Vec<FeatureMap<T>>> {
    if channels.iter().sum::<usize>() != dy.dims().c {
        return Err(Error::shape(format!("concat gradient {} split into {channels:?}", dy.dims())));
    }
    if physical {
        log.read(Operand::OutputGrad(0));
    }
    let mut out = Vec::with_capacity(channels.len());
    let mut c0 = 0;
    for (i, &c) in channels.iter().enumerate() {
        let part = dy.slice_channels(c0, c)?;
        if physical {
            log.write(Operand::InputGrad(i));
            out.push(FeatureMap::dense(part.to_tensor()));
        } else {
            out.push(part);
        }
        c0 += c;
    }
    Ok(out)
}

/// Split forward is pointer passing: every consumer sees the same storage.
pub fn split_fwd<T: Real>(x: &FeatureMap<T>, fanout: usize) -> Result<Vec<FeatureMap<T>>> {
    if fanout < 2 {
        return Err(Error::shape(format!("split fanout {fanout} must be at least 2")));
    }
    Ok(vec![x.clone(); fanout])
}

/// Split backward sums the gradients of all consumers.
pub fn split_bwd<T: Real, P: Planes<T>>(dys: &[&P]) -> Result<Tensor4D<T>> {
    split_bwd_logged(dys, &mut PassLog::new())
}

pub(crate) fn split_bwd_logged<T: Real, P: Planes<T> + ?Sized>(dys: &[&P], log: &mut PassLog) -> Result<Tensor4D<T>> {
    let first = dys.first().ok_or_else(|| Error::shape("split backward with no gradients"))?;
    let dims = first.dims();
    for d in dys {
        same_dims(dims, d.dims(), "split gradients")?;
    }
    let mut out = Tensor4D::zeros_unchecked(dims);
    for (i, _) in dys.iter().enumerate() {
        log.read(Operand::OutputGrad(i));
    }
    log.write(Operand::InputGrad(0));
    for n in 0..dims.n {
        for c in 0..dims.c {
            let acc = out.plane_mut(n, c);
            for d in dys {
                for (a, &v) in acc.iter_mut().zip(d.plane(n, c)) {
                    *a = *a + v;
                }
            }
        }
    }
    Ok(out)
}
