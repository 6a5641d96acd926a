use super::layout::{same_dims, Planes};
use crate::error::Result;
use crate::fmap::FeatureMap;
use crate::sweep::{Operand, PassLog};
use crate::tensor::{Real, Tensor4D};

fn zip_planes<T: Real, A: Planes<T> + ?Sized, B: Planes<T> + ?Sized>(
    a: &A,
    b: &B,
    f: impl Fn(T, T) -> T,
) -> Tensor4D<T> {
    let d = a.dims();
    let mut out = Tensor4D::zeros_unchecked(d);
    for n in 0..d.n {
        for c in 0..d.c {
            for ((o, &x), &y) in out.plane_mut(n, c).iter_mut().zip(a.plane(n, c)).zip(b.plane(n, c)) {
                *o = f(x, y);
            }
        }
    }
    out
}

#[inline]
pub(crate) fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// `max(x, 0)`.
pub fn relu_fwd<T: Real, X: Planes<T> + ?Sized>(x: &X) -> Tensor4D<T> {
    relu_fwd_logged(x, &mut PassLog::new())
}

pub(crate) fn relu_fwd_logged<T: Real, X: Planes<T> + ?Sized>(x: &X, log: &mut PassLog) -> Tensor4D<T> {
    log.read(Operand::Input(0));
    log.write(Operand::Output(0));
    zip_planes(x, x, |v, _| relu(v))
}

/// Passes `dy` where `x > 0`; the subgradient at zero is zero.
pub fn relu_bwd<T: Real, X: Planes<T> + ?Sized, D: Planes<T> + ?Sized>(x: &X, dy: &D) -> Result<Tensor4D<T>> {
    relu_bwd_logged(x, dy, &mut PassLog::new())
}

pub(crate) fn relu_bwd_logged<T: Real, X: Planes<T> + ?Sized, D: Planes<T> + ?Sized>(
    x: &X,
    dy: &D,
    log: &mut PassLog,
) -> Result<Tensor4D<T>> {
    same_dims(x.dims(), dy.dims(), "ReLU input and output gradient")?;
    log.read(Operand::Input(0));
    log.read(Operand::OutputGrad(0));
    log.write(Operand::InputGrad(0));
    Ok(zip_planes(x, dy, |v, g| if v > T::zero() { g } else { T::zero() }))
}

/// Element-wise sum joining a residual skip path.
pub fn ews_fwd<T: Real, A: Planes<T> + ?Sized, B: Planes<T> + ?Sized>(a: &A, b: &B) -> Result<Tensor4D<T>> {
    ews_fwd_logged(a, b, &mut PassLog::new())
}

pub(crate) fn ews_fwd_logged<T: Real, A: Planes<T> + ?Sized, B: Planes<T> + ?Sized>(
    a: &A,
    b: &B,
    log: &mut PassLog,
) -> Result<Tensor4D<T>> {
    same_dims(a.dims(), b.dims(), "element-wise sum operands")?;
    log.read(Operand::Input(0));
    log.read(Operand::Input(1));
    log.write(Operand::Output(0));
    Ok(zip_planes(a, b, |x, y| x + y))
}

/// Both operands receive the output gradient unchanged (shared, not copied).
pub fn ews_bwd<T: Real>(dy: &FeatureMap<T>) -> (FeatureMap<T>, FeatureMap<T>) {
    (dy.clone(), dy.clone())
}
