//! Convolution engine with fused input prologues and statistics epilogues.
//!
//! Work is split by sample. Within a sample the input channels are staged in
//! groups that fit the on-chip budget; a prologue (ReLU, or normalize+ReLU)
//! is applied while staging, so each input element is transformed once.
//! Per output element, contributions are added in `(ic, kh, kw)` order with
//! the bias first, the same order as the direct-loop reference, so the
//! forward result is bit-identical to [`conv2d_fwd`](crate::ops::conv2d_fwd).

use rayon::prelude::*;

use super::norm::PendingBnGrad;
use super::{Fault, KernelConfig};
use crate::error::{Error, Result};
use crate::fmap::FeatureMap;
use crate::ops::{
    plane_relu_dbeta_dgamma, plane_sums, relu, stats_from_partials, BnCoeffs, BnParams, ChannelStats, ConvGeometry,
    ConvGrads, ConvParams, Planes,
};
use crate::sweep::{Operand, PassLog};
use crate::tensor::{Dims, Real, Tensor4D};

/// Transformation applied to the ifmap as the convolution reads it.
#[derive(Debug, Clone, Copy)]
pub enum ConvPrologue<'a, T> {
    None,
    Relu,
    NormRelu(&'a BnCoeffs<T>),
}

#[derive(Debug, Clone)]
pub struct ConvFwdOut<T> {
    pub y: Tensor4D<T>,
    /// The transformed input, saved for backward (normalize+ReLU only).
    pub postrelu: Option<Tensor4D<T>>,
    pub stats: Option<ChannelStats>,
}

/// Output gradient of a convolution.
#[derive(Clone, Copy)]
pub enum ConvGradIn<'a, T> {
    Dense(&'a FeatureMap<T>),
    /// BN input gradient formed on the fly from the BN output gradient and
    /// the convolution's own output `y` (the BN input).
    Bn { grad: &'a PendingBnGrad<T>, y: &'a (dyn Planes<T> + Sync) },
}

#[derive(Debug, Clone)]
pub struct ConvBwdOut<T> {
    /// Gradient w.r.t. the convolution input after the prologue adjoint.
    /// Under normalize+ReLU this is the gradient w.r.t. the BN output.
    pub dx: Tensor4D<T>,
    pub dw: Tensor4D<T>,
    pub dbias: Vec<T>,
    /// `(dγ, dβ)` of the prologue BN.
    pub bn: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct NrcGrads<T> {
    /// BN input gradient, still to be resolved against the BN input.
    pub pending: PendingBnGrad<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
    pub dw: Tensor4D<T>,
    pub dbias: Vec<T>,
}

/// Valid output columns `[lo, hi)` for kernel column `k` (input column `o·s + k − pad`).
#[inline]
fn valid_range(k: usize, g: &ConvGeometry, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = if k >= g.pad { 0 } else { (g.pad - k).div_ceil(s) };
    let hi = if in_len + g.pad > k { ((in_len + g.pad - k - 1) / s + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// `y += w ⋆ x` for one (input plane, output plane) pair.
fn accumulate_plane<T: Real>(xp: &[T], xd: Dims, yd: Dims, wk: &[T], g: &ConvGeometry, yp: &mut [T]) {
    if g.is_pointwise() {
        let wv = wk[0];
        for (o, &v) in yp.iter_mut().zip(xp) {
            *o = *o + v * wv;
        }
        return;
    }
    for kh in 0..g.kh {
        let (h_lo, h_hi) = valid_range(kh, g, xd.h, yd.h);
        for kw in 0..g.kw {
            let wv = wk[kh * g.kw + kw];
            let (w_lo, w_hi) = valid_range(kw, g, xd.w, yd.w);
            for oh in h_lo..h_hi {
                let ih = oh * g.stride + kh - g.pad;
                let row = &xp[ih * xd.w..(ih + 1) * xd.w];
                let yrow = &mut yp[oh * yd.w..(oh + 1) * yd.w];
                if g.stride == 1 {
                    let off = w_lo + kw - g.pad;
                    for (o, &v) in yrow[w_lo..w_hi].iter_mut().zip(&row[off..]) {
                        *o = *o + v * wv;
                    }
                } else {
                    for ow in w_lo..w_hi {
                        yrow[ow] = yrow[ow] + row[ow * g.stride + kw - g.pad] * wv;
                    }
                }
            }
        }
    }
}

/// `dx += wᵀ ⋆ dy` for one (output-gradient plane, input-gradient plane) pair.
fn scatter_plane<T: Real>(dyp: &[T], xd: Dims, yd: Dims, wk: &[T], g: &ConvGeometry, dxp: &mut [T]) {
    if g.is_pointwise() {
        let wv = wk[0];
        for (o, &d) in dxp.iter_mut().zip(dyp) {
            *o = *o + d * wv;
        }
        return;
    }
    for kh in 0..g.kh {
        let (h_lo, h_hi) = valid_range(kh, g, xd.h, yd.h);
        for kw in 0..g.kw {
            let wv = wk[kh * g.kw + kw];
            let (w_lo, w_hi) = valid_range(kw, g, xd.w, yd.w);
            for oh in h_lo..h_hi {
                let ih = oh * g.stride + kh - g.pad;
                let drow = &dyp[oh * yd.w..(oh + 1) * yd.w];
                let xrow = &mut dxp[ih * xd.w..(ih + 1) * xd.w];
                if g.stride == 1 {
                    let off = w_lo + kw - g.pad;
                    for (o, &d) in xrow[off..].iter_mut().zip(&drow[w_lo..w_hi]) {
                        *o = *o + d * wv;
                    }
                } else {
                    for ow in w_lo..w_hi {
                        let iw = ow * g.stride + kw - g.pad;
                        xrow[iw] = xrow[iw] + drow[ow] * wv;
                    }
                }
            }
        }
    }
}

/// `Σ dy·x` over the window positions of one weight tap.
fn correlate_plane<T: Real>(dyp: &[T], xp: &[T], xd: Dims, yd: Dims, g: &ConvGeometry, out: &mut [T], row: &mut Vec<T>) {
    if g.is_pointwise() {
        out[0] = dot(dyp, xp);
        return;
    }
    row.resize(yd.w, T::zero());
    for kh in 0..g.kh {
        let (h_lo, h_hi) = valid_range(kh, g, xd.h, yd.h);
        for kw in 0..g.kw {
            let (w_lo, w_hi) = valid_range(kw, g, xd.w, yd.w);
            let acc = &mut row[w_lo..w_hi];
            acc.fill(T::zero());
            for oh in h_lo..h_hi {
                let ih = oh * g.stride + kh - g.pad;
                let drow = &dyp[oh * yd.w + w_lo..oh * yd.w + w_hi];
                let xrow = &xp[ih * xd.w..(ih + 1) * xd.w];
                if g.stride == 1 {
                    let off = w_lo + kw - g.pad;
                    for ((a, &d), &v) in acc.iter_mut().zip(drow).zip(&xrow[off..]) {
                        *a = *a + d * v;
                    }
                } else {
                    for (i, (a, &d)) in acc.iter_mut().zip(drow).enumerate() {
                        *a = *a + d * xrow[(w_lo + i) * g.stride + kw - g.pad];
                    }
                }
            }
            out[kh * g.kw + kw] = acc.iter().fold(T::zero(), |s, &v| s + v);
        }
    }
}

/// Dot product with independent partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut acc = [T::zero(); L];
    let (ac, bc) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..L {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    for (i, (&x, &y)) in ar.iter().zip(br).enumerate() {
        acc[i] = acc[i] + x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v)
}

fn stage<T: Real>(src: &[T], pro: ConvPrologue<'_, T>, c: usize, dst: &mut [T]) {
    match pro {
        ConvPrologue::None => dst.copy_from_slice(src),
        ConvPrologue::Relu => {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = relu(v);
            }
        }
        ConvPrologue::NormRelu(co) => {
            let cn = co.at(c);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = cn.normalize_relu(v);
            }
        }
    }
}

fn check_prologue<T: Real>(pro: ConvPrologue<'_, T>, xd: Dims) -> Result<()> {
    if let ConvPrologue::NormRelu(co) = pro {
        if co.mean.len() != xd.c {
            return Err(Error::shape(format!("normalization for {} channels on input {xd}", co.mean.len())));
        }
    }
    Ok(())
}

pub fn conv_fwd<T: Real, X: Planes<T> + Sync + ?Sized>(
    x: &X,
    p: &ConvParams<T>,
    pro: ConvPrologue<'_, T>,
    want_stats: bool,
    cfg: &KernelConfig,
) -> Result<ConvFwdOut<T>> {
    conv_fwd_logged(x, p, pro, want_stats, cfg, &mut PassLog::new())
}

pub(crate) fn conv_fwd_logged<T: Real, X: Planes<T> + Sync + ?Sized>(
    x: &X,
    p: &ConvParams<T>,
    pro: ConvPrologue<'_, T>,
    want_stats: bool,
    cfg: &KernelConfig,
    log: &mut PassLog,
) -> Result<ConvFwdOut<T>> {
    p.validate()?;
    let g = p.geom;
    let xd = x.dims();
    let yd = g.output_dims(xd)?;
    check_prologue(pro, xd)?;
    log.read(Operand::Input(0));
    log.read(Operand::Weight);
    log.write(Operand::Output(0));
    let save = matches!(pro, ConvPrologue::NormRelu(_));
    if save {
        log.write(Operand::Output(1));
    }

    let (hw, ohw, taps) = (xd.plane(), yd.plane(), g.kh * g.kw);
    let group = cfg.planes_per_tile::<T>(hw);
    let mut y = Tensor4D::zeros_unchecked(yd);
    let mut post = save.then(|| Tensor4D::zeros_unchecked(xd));
    let post_chunks: Vec<Option<&mut [T]>> = match post.as_mut() {
        Some(t) => t.data_mut().chunks_mut(xd.c * hw).map(Some).collect(),
        None => (0..xd.n).map(|_| None).collect(),
    };
    let weights = p.weights.data();

    let partials: Vec<Vec<(f64, f64)>> = y
        .data_mut()
        .par_chunks_mut(yd.c * ohw)
        .zip(post_chunks.into_par_iter())
        .enumerate()
        .map(|(n, (ys, mut ps))| {
            for oc in 0..g.out_c {
                ys[oc * ohw..(oc + 1) * ohw].fill(p.bias[oc]);
            }
            let mut scratch = Vec::new();
            let mut ic0 = 0;
            while ic0 < g.in_c {
                let cnt = group.min(g.in_c - ic0);
                let staged = !matches!(pro, ConvPrologue::None);
                if staged {
                    scratch.resize(cnt * hw, T::zero());
                    for i in 0..cnt {
                        let dst = &mut scratch[i * hw..(i + 1) * hw];
                        stage(x.plane(n, ic0 + i), pro, ic0 + i, dst);
                        if let Some(ps) = ps.as_deref_mut() {
                            ps[(ic0 + i) * hw..(ic0 + i + 1) * hw].copy_from_slice(dst);
                        }
                    }
                }
                for oc in 0..g.out_c {
                    let yp = &mut ys[oc * ohw..(oc + 1) * ohw];
                    for i in 0..cnt {
                        let ic = ic0 + i;
                        let xp = if staged { &scratch[i * hw..(i + 1) * hw] } else { x.plane(n, ic) };
                        let wk = &weights[(oc * g.in_c + ic) * taps..(oc * g.in_c + ic + 1) * taps];
                        accumulate_plane(xp, xd, yd, wk, &g, yp);
                    }
                }
                ic0 += cnt;
            }
            if want_stats {
                (0..g.out_c).map(|oc| plane_sums(&ys[oc * ohw..(oc + 1) * ohw])).collect()
            } else {
                Vec::new()
            }
        })
        .collect();

    let stats = want_stats.then(|| stats_from_partials(&partials.concat(), yd));
    Ok(ConvFwdOut { y, postrelu: post, stats })
}

/// Output gradient of sample `n` into `buf` (`out_c` planes).
fn load_dy<T: Real>(dy: ConvGradIn<'_, T>, n: usize, yd: Dims, buf: &mut Vec<T>) {
    let ohw = yd.plane();
    buf.resize(yd.c * ohw, T::zero());
    for oc in 0..yd.c {
        let out = &mut buf[oc * ohw..(oc + 1) * ohw];
        match dy {
            ConvGradIn::Dense(d) => out.copy_from_slice(d.plane(n, oc)),
            ConvGradIn::Bn { grad, y } => grad.resolve_plane(n, oc, y.plane(n, oc), out),
        }
    }
}

fn log_dy_read<T>(dy: ConvGradIn<'_, T>, log: &mut PassLog) {
    log.read(Operand::OutputGrad(0));
    if matches!(dy, ConvGradIn::Bn { .. }) {
        log.read(Operand::Output(0));
    }
}

pub fn conv_bwd<T: Real, X: Planes<T> + Sync + ?Sized>(
    x: &X,
    postrelu: Option<&(dyn Planes<T> + Sync)>,
    dy: ConvGradIn<'_, T>,
    p: &ConvParams<T>,
    pro: ConvPrologue<'_, T>,
    cfg: &KernelConfig,
) -> Result<ConvBwdOut<T>> {
    conv_bwd_logged(x, postrelu, dy, p, pro, cfg, &mut PassLog::new())
}

/// Two passes: the data-gradient pass (with the prologue adjoint and, for
/// normalize+ReLU, the dγ/dβ reduction) and the weight-gradient pass.
pub(crate) fn conv_bwd_logged<T: Real, X: Planes<T> + Sync + ?Sized>(
    x: &X,
    postrelu: Option<&(dyn Planes<T> + Sync)>,
    dy: ConvGradIn<'_, T>,
    p: &ConvParams<T>,
    pro: ConvPrologue<'_, T>,
    cfg: &KernelConfig,
    log: &mut PassLog,
) -> Result<ConvBwdOut<T>> {
    p.validate()?;
    let g = p.geom;
    let xd = x.dims();
    let yd = g.output_dims(xd)?;
    check_prologue(pro, xd)?;
    let dyd = match dy {
        ConvGradIn::Dense(d) => d.dims(),
        ConvGradIn::Bn { grad, y } => {
            if y.dims() != yd {
                return Err(Error::shape(format!("saved conv output {} for output {yd}", y.dims())));
            }
            grad.dims()
        }
    };
    if dyd != yd {
        return Err(Error::shape(format!("conv output gradient {dyd} but output is {yd}")));
    }
    let norm = match pro {
        ConvPrologue::NormRelu(co) => {
            let post = postrelu.ok_or_else(|| Error::state("normalize-ReLU conv backward without saved post-ReLU input"))?;
            if post.dims() != xd {
                return Err(Error::shape(format!("saved post-ReLU {} for input {xd}", post.dims())));
            }
            Some(co)
        }
        _ => None,
    };
    let (hw, ohw, taps) = (xd.plane(), yd.plane(), g.kh * g.kw);
    let weights = p.weights.data();

    // Data-gradient pass.
    log_dy_read(dy, log);
    log.read(Operand::Weight);
    if !matches!(pro, ConvPrologue::None) {
        log.read(Operand::Input(0));
    }
    log.write(Operand::InputGrad(0));
    let mut dx = Tensor4D::zeros_unchecked(xd);
    let bn_partials: Vec<Vec<(f64, f64)>> = dx
        .data_mut()
        .par_chunks_mut(xd.c * hw)
        .enumerate()
        .map(|(n, dxs)| {
            let mut dys = Vec::new();
            load_dy(dy, n, yd, &mut dys);
            let mut parts = Vec::new();
            for ic in 0..g.in_c {
                let dxp = &mut dxs[ic * hw..(ic + 1) * hw];
                for oc in 0..g.out_c {
                    let wk = &weights[(oc * g.in_c + ic) * taps..(oc * g.in_c + ic + 1) * taps];
                    scatter_plane(&dys[oc * ohw..(oc + 1) * ohw], xd, yd, wk, &g, dxp);
                }
                match pro {
                    ConvPrologue::None => {}
                    ConvPrologue::Relu => {
                        for (d, &v) in dxp.iter_mut().zip(x.plane(n, ic)) {
                            *d = if v > T::zero() { *d } else { T::zero() };
                        }
                    }
                    ConvPrologue::NormRelu(co) => {
                        parts.push(plane_relu_dbeta_dgamma(dxp, x.plane(n, ic), co, ic));
                    }
                }
            }
            parts
        })
        .collect();

    let bn = norm.map(|_| {
        let mut dgamma = vec![0.0; xd.c];
        let mut dbeta = vec![0.0; xd.c];
        for parts in &bn_partials {
            for (c, &(db, dg)) in parts.iter().enumerate() {
                dbeta[c] += db;
                dgamma[c] += dg;
            }
        }
        if cfg.fault == Some(Fault::SkipDgamma) {
            dgamma.iter_mut().for_each(|v| *v = 0.0);
        }
        (dgamma, dbeta)
    });

    // Weight-gradient pass.
    log_dy_read(dy, log);
    log.read(if norm.is_some() { Operand::Output(1) } else { Operand::Input(0) });
    log.write(Operand::WeightGrad);
    let group = cfg.planes_per_tile::<T>(hw);
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..xd.n)
        .into_par_iter()
        .map(|n| {
            let mut dys = Vec::new();
            load_dy(dy, n, yd, &mut dys);
            let mut dw = vec![T::zero(); g.weight_len()];
            let db = (0..g.out_c)
                .map(|oc| dys[oc * ohw..(oc + 1) * ohw].iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            let (mut scratch, mut row) = (Vec::new(), Vec::new());
            let mut ic0 = 0;
            while ic0 < g.in_c {
                let cnt = group.min(g.in_c - ic0);
                let relu_staged = matches!(pro, ConvPrologue::Relu);
                if relu_staged {
                    scratch.resize(cnt * hw, T::zero());
                    for i in 0..cnt {
                        stage(x.plane(n, ic0 + i), pro, ic0 + i, &mut scratch[i * hw..(i + 1) * hw]);
                    }
                }
                for oc in 0..g.out_c {
                    let dyp = &dys[oc * ohw..(oc + 1) * ohw];
                    for i in 0..cnt {
                        let ic = ic0 + i;
                        let xp = match (relu_staged, postrelu) {
                            (true, _) => &scratch[i * hw..(i + 1) * hw],
                            (false, Some(post)) if norm.is_some() => post.plane(n, ic),
                            _ => x.plane(n, ic),
                        };
                        let at = (oc * g.in_c + ic) * taps;
                        correlate_plane(dyp, xp, xd, yd, &g, &mut dw[at..at + taps], &mut row);
                    }
                }
                ic0 += cnt;
            }
            (dw, db)
        })
        .collect();

    let mut dw = Tensor4D::zeros_unchecked(g.weight_dims());
    let mut dbias = vec![T::zero(); g.out_c];
    for (w, b) in &per_sample {
        for (a, &v) in dw.data_mut().iter_mut().zip(w) {
            *a = *a + v;
        }
        for (a, &v) in dbias.iter_mut().zip(b) {
            *a = *a + v;
        }
    }
    Ok(ConvBwdOut { dx, dw, dbias, bn })
}

/// CONV with the statistics half of the following BN folded into its output write.
pub fn fused_conv_stats_fwd<T: Real, X: Planes<T> + Sync + ?Sized>(
    x: &X,
    conv: &ConvParams<T>,
) -> Result<(Tensor4D<T>, ChannelStats)> {
    let out = conv_fwd(x, conv, ConvPrologue::None, true, &KernelConfig::default())?;
    Ok((out.y, out.stats.expect("stats requested")))
}

/// Normalization half of a BN, ReLU and CONV in one read of `x`.
pub fn fused_norm_relu_conv_fwd<T: Real, X: Planes<T> + Sync + ?Sized>(
    x: &X,
    stats: &ChannelStats,
    bn: &BnParams<T>,
    conv: &ConvParams<T>,
) -> Result<(Tensor4D<T>, Tensor4D<T>)> {
    crate::ops::check_stats(stats, x.dims())?;
    let co = BnCoeffs::new(stats, bn)?;
    let out = conv_fwd(x, conv, ConvPrologue::NormRelu(&co), false, &KernelConfig::default())?;
    Ok((out.y, out.postrelu.expect("post-ReLU saved")))
}

/// Backward of [`fused_norm_relu_conv_fwd`]: conv data and weight gradients,
/// the ReLU mask, and dγ/dβ in the data-gradient pass.
pub fn fused_nrc_bwd<T: Real, X: Planes<T> + Sync + ?Sized>(
    dy: &FeatureMap<T>,
    x: &X,
    saved_postrelu: &Tensor4D<T>,
    stats: &ChannelStats,
    bn: &BnParams<T>,
    conv: &ConvParams<T>,
) -> Result<NrcGrads<T>> {
    crate::ops::check_stats(stats, x.dims())?;
    let co = BnCoeffs::new(stats, bn)?;
    let out = conv_bwd(
        x,
        Some(saved_postrelu),
        ConvGradIn::Dense(dy),
        conv,
        ConvPrologue::NormRelu(&co),
        &KernelConfig::default(),
    )?;
    let (dgamma, dbeta) = out.bn.expect("normalize-ReLU backward yields BN gradients");
    Ok(NrcGrads {
        pending: PendingBnGrad::new(FeatureMap::dense(out.dx), co, &dgamma, &dbeta),
        dgamma: dgamma.iter().map(|&v| T::cast_from(v)).collect(),
        dbeta: dbeta.iter().map(|&v| T::cast_from(v)).collect(),
        dw: out.dw,
        dbias: out.dbias,
    })
}

/// Backward of [`fused_conv_stats_fwd`]: the BN input gradient is formed
/// from `pending` and the saved output `y` while the conv reads its output
/// gradient.
pub fn fused_conv_stats_bwd<T: Real, X: Planes<T> + Sync + ?Sized>(
    pending: &PendingBnGrad<T>,
    y: &Tensor4D<T>,
    x: &X,
    conv: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    let out = conv_bwd(
        x,
        None,
        ConvGradIn::Bn { grad: pending, y },
        conv,
        ConvPrologue::None,
        &KernelConfig::default(),
    )?;
    Ok(ConvGrads { dx: out.dx, dw: out.dw, dbias: out.dbias })
}
