use serde::{Deserialize, Serialize};

use super::layout::Planes;
use crate::error::{Error, Result};
use crate::sweep::{Operand, PassLog};
use crate::tensor::{Dims, Real, Tensor4D};

/// Average-pooling window; `stride == k` gives the non-overlapping case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub k: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn new(k: usize, stride: usize) -> Self {
        PoolGeometry { k, stride }
    }

    pub fn output_dims(&self, x: Dims) -> Result<Dims> {
        if self.k == 0 || self.stride == 0 || x.h < self.k || x.w < self.k {
            return Err(Error::shape(format!("pool {self:?} on {x}")));
        }
        Ok(Dims::new(x.n, x.c, (x.h - self.k) / self.stride + 1, (x.w - self.k) / self.stride + 1))
    }
}

pub fn avgpool_fwd<T: Real, X: Planes<T> + ?Sized>(x: &X, g: PoolGeometry) -> Result<Tensor4D<T>> {
    avgpool_fwd_logged(x, g, &mut PassLog::new())
}

pub(crate) fn avgpool_plane<T: Real>(x: &[T], xd: Dims, yd: Dims, g: PoolGeometry, out: &mut [T]) {
    let inv = T::cast_from(1.0 / (g.k * g.k) as f64);
    for oh in 0..yd.h {
        for ow in 0..yd.w {
            let mut acc = T::zero();
            for kh in 0..g.k {
                let row = (oh * g.stride + kh) * xd.w + ow * g.stride;
                for &v in &x[row..row + g.k] {
                    acc = acc + v;
                }
            }
            out[oh * yd.w + ow] = acc * inv;
        }
    }
}

pub(crate) fn avgpool_fwd_logged<T: Real, X: Planes<T> + ?Sized>(
    x: &X,
    g: PoolGeometry,
    log: &mut PassLog,
) -> Result<Tensor4D<T>> {
    let xd = x.dims();
    let yd = g.output_dims(xd)?;
    log.read(Operand::Input(0));
    log.write(Operand::Output(0));
    let mut y = Tensor4D::zeros_unchecked(yd);
    for n in 0..xd.n {
        for c in 0..xd.c {
            avgpool_plane(x.plane(n, c), xd, yd, g, y.plane_mut(n, c));
        }
    }
    Ok(y)
}

/// Spreads each output gradient uniformly, `dy / k²`, over its window.
pub fn avgpool_bwd<T: Real, D: Planes<T> + ?Sized>(dy: &D, x_dims: Dims, g: PoolGeometry) -> Result<Tensor4D<T>> {
    avgpool_bwd_logged(dy, x_dims, g, &mut PassLog::new())
}

pub(crate) fn avgpool_bwd_logged<T: Real, D: Planes<T> + ?Sized>(
    dy: &D,
    x_dims: Dims,
    g: PoolGeometry,
    log: &mut PassLog,
) -> Result<Tensor4D<T>> {
    let yd = g.output_dims(x_dims)?;
    if dy.dims() != yd {
        return Err(Error::shape(format!("pool gradient {} for output {yd}", dy.dims())));
    }
    log.read(Operand::OutputGrad(0));
    log.write(Operand::InputGrad(0));
    let inv = T::cast_from(1.0 / (g.k * g.k) as f64);
    let mut dx = Tensor4D::zeros_unchecked(x_dims);
    for n in 0..yd.n {
        for c in 0..yd.c {
            let dplane = dy.plane(n, c);
            let out = dx.plane_mut(n, c);
            for oh in 0..yd.h {
                for ow in 0..yd.w {
                    let share = dplane[oh * yd.w + ow] * inv;
                    for kh in 0..g.k {
                        let row = (oh * g.stride + kh) * x_dims.w + ow * g.stride;
                        for o in &mut out[row..row + g.k] {
                            *o = *o + share;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}
