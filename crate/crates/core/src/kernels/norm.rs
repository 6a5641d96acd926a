//! Fissioned BN halves and the kernels that absorb them.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmap::FeatureMap;
use crate::ops::{
    avgpool_plane, check_stats, dgamma_dbeta_logged, plane_sums, same_dims, stats_from_partials, BnCoeffs, BnParams,
    ChannelStats, DxCoeffs, Planes, PoolGeometry,
};
use crate::sweep::{Operand, PassLog};
use crate::tensor::{Dims, Real, Tensor4D};

/// A BN input gradient in deferred form: `g` is the gradient w.r.t. the BN
/// output (after any ReLU mask), and the BN input gradient
/// `γ·inv_std·(g − Σg/m − x̂·Σ(g·x̂)/m)` is produced by whichever kernel
/// next streams the BN input.
#[derive(Debug, Clone)]
pub struct PendingBnGrad<T> {
    pub g: FeatureMap<T>,
    co: Arc<BnCoeffs<T>>,
    k: Arc<DxCoeffs<T>>,
    c0: usize,
}

impl<T: Real> PendingBnGrad<T> {
    pub(crate) fn new(g: FeatureMap<T>, co: BnCoeffs<T>, dgamma: &[f64], dbeta: &[f64]) -> Self {
        let k = DxCoeffs::new(&co, dgamma, dbeta, g.dims().per_channel());
        PendingBnGrad { g, co: Arc::new(co), k: Arc::new(k), c0: 0 }
    }

    pub fn dims(&self) -> Dims {
        self.g.dims()
    }

    /// Channels `[c0, c0 + c)`; BN is per channel, so the slice stays exact.
    pub fn slice(&self, c0: usize, c: usize) -> Result<Self> {
        Ok(PendingBnGrad { g: self.g.slice_channels(c0, c)?, co: self.co.clone(), k: self.k.clone(), c0: self.c0 + c0 })
    }

    #[inline]
    pub(crate) fn resolve_plane(&self, n: usize, c: usize, x: &[T], out: &mut [T]) {
        let k = self.k.at(&self.co, self.c0 + c);
        for ((o, &g), &v) in out.iter_mut().zip(self.g.plane(n, c)).zip(x) {
            *o = k.dx(g, v);
        }
    }

    #[inline]
    fn accumulate_plane(&self, n: usize, c: usize, x: &[T], acc: &mut [T]) {
        let k = self.k.at(&self.co, self.c0 + c);
        for ((a, &g), &v) in acc.iter_mut().zip(self.g.plane(n, c)).zip(x) {
            *a = *a + k.dx(g, v);
        }
    }

    /// Materializes the BN input gradient given the BN input `x`.
    pub fn resolve<X: Planes<T> + ?Sized>(&self, x: &X) -> Result<Tensor4D<T>> {
        let d = x.dims();
        same_dims(d, self.dims(), "pending BN gradient and BN input")?;
        let mut out = Tensor4D::zeros_unchecked(d);
        for n in 0..d.n {
            for c in 0..d.c {
                self.resolve_plane(n, c, x.plane(n, c), out.plane_mut(n, c));
            }
        }
        Ok(out)
    }
}

/// Gradient arriving at a tensor slot.
#[derive(Debug, Clone)]
pub enum GradValue<T> {
    Dense(FeatureMap<T>),
    Bn(PendingBnGrad<T>),
}

impl<T: Real> GradValue<T> {
    pub fn dims(&self) -> Dims {
        match self {
            GradValue::Dense(d) => d.dims(),
            GradValue::Bn(p) => p.dims(),
        }
    }
}

/// Backward of the normalization half: dγ/dβ from one sweep over `dy` and
/// `x`; the input gradient is left pending.
pub fn sub_bn2_bwd<T: Real, X: Planes<T> + ?Sized>(
    x: &X,
    dy: &FeatureMap<T>,
    stats: &ChannelStats,
    bn: &BnParams<T>,
) -> Result<(PendingBnGrad<T>, Vec<T>, Vec<T>)> {
    let (p, dg, db) = sub_bn2_bwd_logged(x, dy, stats, bn, &mut PassLog::new())?;
    Ok((p, dg.iter().map(|&v| T::cast_from(v)).collect(), db.iter().map(|&v| T::cast_from(v)).collect()))
}

pub(crate) fn sub_bn2_bwd_logged<T: Real, X: Planes<T> + ?Sized>(
    x: &X,
    dy: &FeatureMap<T>,
    stats: &ChannelStats,
    bn: &BnParams<T>,
    log: &mut PassLog,
) -> Result<(PendingBnGrad<T>, Vec<f64>, Vec<f64>)> {
    let d = x.dims();
    same_dims(d, dy.dims(), "BN input and output gradient")?;
    check_stats(stats, d)?;
    let co = BnCoeffs::new(stats, bn)?;
    let (dgamma, dbeta) = dgamma_dbeta_logged(x, dy, &co, log);
    Ok((PendingBnGrad::new(dy.clone(), co, &dgamma, &dbeta), dgamma, dbeta))
}

/// Backward of a standalone statistics half: one sweep reading the pending
/// gradient and `x`, writing the BN input gradient.
pub fn sub_bn1_bwd<T: Real, X: Planes<T> + ?Sized>(x: &X, pending: &PendingBnGrad<T>) -> Result<Tensor4D<T>> {
    sub_bn1_bwd_logged(x, pending, &mut PassLog::new())
}

pub(crate) fn sub_bn1_bwd_logged<T: Real, X: Planes<T> + ?Sized>(
    x: &X,
    pending: &PendingBnGrad<T>,
    log: &mut PassLog,
) -> Result<Tensor4D<T>> {
    log.read(Operand::InputGrad(0));
    log.read(Operand::Input(0));
    log.write(Operand::InputGrad(0));
    pending.resolve(x)
}

/// Concat that also yields the statistics of its output. A physical concat
/// accumulates Σx/Σx² during the copy; a view concat merges the statistics
/// its producers accumulated while writing (`input_stats`).
pub fn fused_concat_stats_fwd<T: Real>(
    xs: &[&FeatureMap<T>],
    input_stats: Option<&[&ChannelStats]>,
    physical: bool,
) -> Result<(FeatureMap<T>, ChannelStats)> {
    fused_concat_stats_fwd_logged(xs, input_stats, physical, &mut PassLog::new())
}

pub(crate) fn fused_concat_stats_fwd_logged<T: Real>(
    xs: &[&FeatureMap<T>],
    input_stats: Option<&[&ChannelStats]>,
    physical: bool,
    log: &mut PassLog,
) -> Result<(FeatureMap<T>, ChannelStats)> {
    let view = FeatureMap::concat(xs)?;
    let d = view.dims();
    if !physical {
        let parts = input_stats.ok_or_else(|| Error::state("view concat needs the statistics of its inputs"))?;
        if parts.len() != xs.len() {
            return Err(Error::shape(format!("{} statistics for {} concat inputs", parts.len(), xs.len())));
        }
        for (x, s) in xs.iter().zip(parts) {
            check_stats(s, x.dims())?;
        }
        return Ok((view, ChannelStats::concat(parts)?));
    }
    for i in 0..xs.len() {
        log.read(Operand::Input(i));
    }
    log.write(Operand::Output(0));
    let mut out = Tensor4D::zeros_unchecked(d);
    let hw = d.plane();
    let partials: Vec<Vec<(f64, f64)>> = out
        .data_mut()
        .par_chunks_mut(d.c * hw)
        .enumerate()
        .map(|(n, os)| {
            (0..d.c)
                .map(|c| {
                    let dst = &mut os[c * hw..(c + 1) * hw];
                    dst.copy_from_slice(view.plane(n, c));
                    plane_sums(dst)
                })
                .collect()
        })
        .collect();
    let stats = stats_from_partials(&partials.concat(), d);
    Ok((FeatureMap::dense(out), stats))
}

/// Split backward that also resolves deferred BN gradients: the sum of all
/// incoming gradients, each pending one turned into a BN input gradient
/// against `x` during the same pass.
pub fn fused_split_bwd_bn_dx<T: Real, X: Planes<T> + Sync + ?Sized>(x: &X, grads: &[GradValue<T>]) -> Result<Tensor4D<T>> {
    fused_split_bwd_bn_dx_logged(x, grads, &mut PassLog::new())
}

pub(crate) fn fused_split_bwd_bn_dx_logged<T: Real, X: Planes<T> + Sync + ?Sized>(
    x: &X,
    grads: &[GradValue<T>],
    log: &mut PassLog,
) -> Result<Tensor4D<T>> {
    let d = x.dims();
    if grads.is_empty() {
        return Err(Error::shape("split backward with no gradients"));
    }
    for gv in grads {
        same_dims(d, gv.dims(), "split gradients")?;
    }
    for (i, gv) in grads.iter().enumerate() {
        log.read(Operand::OutputGrad(i));
        if matches!(gv, GradValue::Bn(_)) {
            log.read(Operand::Input(0));
        }
    }
    log.write(Operand::InputGrad(0));
    let hw = d.plane();
    let mut out = Tensor4D::zeros_unchecked(d);
    out.data_mut().par_chunks_mut(d.c * hw).enumerate().for_each(|(n, os)| {
        for c in 0..d.c {
            let acc = &mut os[c * hw..(c + 1) * hw];
            for gv in grads {
                match gv {
                    GradValue::Dense(g) => {
                        for (a, &v) in acc.iter_mut().zip(g.plane(n, c)) {
                            *a = *a + v;
                        }
                    }
                    GradValue::Bn(p) => p.accumulate_plane(n, c, x.plane(n, c), acc),
                }
            }
        }
    });
    Ok(out)
}

/// Average pooling with the statistics of its output accumulated on write.
pub fn fused_pool_stats_fwd<T: Real, X: Planes<T> + ?Sized>(
    x: &X,
    geom: PoolGeometry,
) -> Result<(Tensor4D<T>, ChannelStats)> {
    fused_pool_stats_fwd_logged(x, geom, &mut PassLog::new())
}

pub(crate) fn fused_pool_stats_fwd_logged<T: Real, X: Planes<T> + ?Sized>(
    x: &X,
    geom: PoolGeometry,
    log: &mut PassLog,
) -> Result<(Tensor4D<T>, ChannelStats)> {
    let xd = x.dims();
    let yd = geom.output_dims(xd)?;
    log.read(Operand::Input(0));
    log.write(Operand::Output(0));
    let mut y = Tensor4D::zeros_unchecked(yd);
    let mut partials = Vec::with_capacity(yd.n * yd.c);
    for n in 0..yd.n {
        for c in 0..yd.c {
            let out = y.plane_mut(n, c);
            avgpool_plane(x.plane(n, c), xd, yd, geom, out);
            partials.push(plane_sums(out));
        }
    }
    Ok((y, stats_from_partials(&partials, yd)))
}
