//! Training-mode batch normalization.
//!
//! Statistics are per channel over the whole mini-batch with population
//! variance. All accumulations run in f64 with a fixed order: each `(n, c)`
//! plane is summed left to right, then planes are added in sample order.
//! Fused kernels reuse the plane primitives below, so fused and unfused
//! paths agree bit for bit wherever they compute the same quantity.

use serde::{Deserialize, Serialize};

use super::layout::{same_dims, Planes};
use crate::error::{Error, Result};
use crate::sweep::{Operand, PassLog};
use crate::tensor::{Dims, Real, Tensor4D};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: f64,
}

impl<T: Real> BnParams<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>, eps: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape(format!("gamma has {} channels, beta {}", gamma.len(), beta.len())));
        }
        if !(eps >= 0.0) {
            return Err(Error::shape(format!("eps {eps} must be non-negative")));
        }
        Ok(BnParams { gamma, beta, eps })
    }

    /// gamma = 1, beta = 0, default eps.
    pub fn identity(channels: usize) -> Self {
        BnParams { gamma: vec![T::one(); channels], beta: vec![T::zero(); channels], eps: DEFAULT_EPS }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Real>(&self) -> BnParams<U> {
        BnParams {
            gamma: self.gamma.iter().map(|v| U::cast_from(v.as_f64())).collect(),
            beta: self.beta.iter().map(|v| U::cast_from(v.as_f64())).collect(),
            eps: self.eps,
        }
    }
}

/// Per-channel mini-batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub sum_x: Vec<f64>,
    pub sum_x2: Vec<f64>,
    /// Elements per channel, `n·h·w`.
    pub count: usize,
    pub mean: Vec<f64>,
    /// Population variance. May be a rounding-sized negative number when
    /// derived from sums; use [`ChannelStats::var_clamped`].
    pub var: Vec<f64>,
}

impl ChannelStats {
    /// Single-pass statistics: `var = E(x²) - E(x)²`.
    pub fn from_sums(sum_x: Vec<f64>, sum_x2: Vec<f64>, count: usize) -> Self {
        let m = count as f64;
        let mean: Vec<f64> = sum_x.iter().map(|s| s / m).collect();
        let var = sum_x2.iter().zip(&mean).map(|(s2, mu)| s2 / m - mu * mu).collect();
        ChannelStats { sum_x, sum_x2, count, mean, var }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn var_clamped(&self, c: usize) -> f64 {
        self.var[c].max(0.0)
    }

    /// Stats of a channel concatenation, from the stats of its parts.
    pub fn concat(parts: &[&ChannelStats]) -> Result<Self> {
        let count = parts.first().ok_or_else(|| Error::shape("concat of zero stats"))?.count;
        let mut out = ChannelStats { sum_x: vec![], sum_x2: vec![], count, mean: vec![], var: vec![] };
        for p in parts {
            if p.count != count {
                return Err(Error::shape(format!("stats over {} and {count} elements", p.count)));
            }
            out.sum_x.extend_from_slice(&p.sum_x);
            out.sum_x2.extend_from_slice(&p.sum_x2);
            out.mean.extend_from_slice(&p.mean);
            out.var.extend_from_slice(&p.var);
        }
        Ok(out)
    }

    /// Channels `[c0, c0 + c)`.
    pub fn slice(&self, c0: usize, c: usize) -> Self {
        let r = c0..c0 + c;
        ChannelStats {
            sum_x: self.sum_x[r.clone()].to_vec(),
            sum_x2: self.sum_x2[r.clone()].to_vec(),
            count: self.count,
            mean: self.mean[r.clone()].to_vec(),
            var: self.var[r].to_vec(),
        }
    }
}

/// Per-plane `(Σx, Σx²)` in f64, left to right.
#[inline]
pub(crate) fn plane_sums<T: Real>(p: &[T]) -> (f64, f64) {
    let (mut s, mut s2) = ([0.0f64; LANES], [0.0f64; LANES]);
    let chunks = p.chunks_exact(LANES);
    let rest = chunks.remainder();
    for ch in chunks {
        for i in 0..LANES {
            let v = ch[i].as_f64();
            s[i] += v;
            s2[i] += v * v;
        }
    }
    for (i, &v) in rest.iter().enumerate() {
        let v = v.as_f64();
        s[i] += v;
        s2[i] += v * v;
    }
    (s.iter().sum(), s2.iter().sum())
}

/// Independent accumulators in the f64 plane reductions.
const LANES: usize = 8;

/// Merges `(n, c)`-indexed plane partials (row-major `n·C + c`) in sample order.
pub(crate) fn stats_from_partials(partials: &[(f64, f64)], dims: Dims) -> ChannelStats {
    let mut sum_x = vec![0.0; dims.c];
    let mut sum_x2 = vec![0.0; dims.c];
    for n in 0..dims.n {
        for c in 0..dims.c {
            let (s, s2) = partials[n * dims.c + c];
            sum_x[c] += s;
            sum_x2[c] += s2;
        }
    }
    ChannelStats::from_sums(sum_x, sum_x2, dims.per_channel())
}

/// Mean/variance fusion: Σx and Σx² gathered in one read of `x`.
pub fn bn_stats_onepass<T: Real, X: Planes<T> + ?Sized>(x: &X) -> ChannelStats {
    bn_stats_onepass_logged(x, &mut PassLog::new())
}

pub(crate) fn bn_stats_onepass_logged<T: Real, X: Planes<T> + ?Sized>(x: &X, log: &mut PassLog) -> ChannelStats {
    log.read(Operand::Input(0));
    let d = x.dims();
    let mut partials = Vec::with_capacity(d.n * d.c);
    for n in 0..d.n {
        for c in 0..d.c {
            partials.push(plane_sums(x.plane(n, c)));
        }
    }
    stats_from_partials(&partials, d)
}

/// One-pass statistics with accumulators of type `A`; `A = f32` exposes the
/// cancellation that `E(x²) - E(x)²` suffers when the mean dominates.
pub fn bn_stats_onepass_acc<A: Real, T: Real, X: Planes<T> + ?Sized>(x: &X) -> ChannelStats {
    let d = x.dims();
    let mut sum_x = vec![0.0; d.c];
    let mut sum_x2 = vec![0.0; d.c];
    for c in 0..d.c {
        let (mut s, mut s2) = (A::zero(), A::zero());
        for n in 0..d.n {
            for &v in x.plane(n, c) {
                let v = A::cast_from(v.as_f64());
                s = s + v;
                s2 = s2 + v * v;
            }
        }
        sum_x[c] = s.as_f64();
        sum_x2[c] = s2.as_f64();
    }
    let m = A::cast_from(d.per_channel() as f64);
    let mut st = ChannelStats::from_sums(sum_x, sum_x2, d.per_channel());
    // Recompute mean and variance in the accumulator type as well.
    for c in 0..d.c {
        let mu = A::cast_from(st.sum_x[c]) / m;
        let var = A::cast_from(st.sum_x2[c]) / m - mu * mu;
        st.mean[c] = mu.as_f64();
        st.var[c] = var.as_f64();
    }
    st
}

/// Two sweeps over `x`: mean first, then the centred second moment.
pub fn bn_stats_twopass<T: Real, X: Planes<T> + ?Sized>(x: &X) -> ChannelStats {
    bn_stats_twopass_logged(x, &mut PassLog::new())
}

pub(crate) fn bn_stats_twopass_logged<T: Real, X: Planes<T> + ?Sized>(x: &X, log: &mut PassLog) -> ChannelStats {
    let d = x.dims();
    let mut st = bn_stats_onepass_logged(x, log);
    log.read(Operand::Input(0));
    let mut centred = vec![0.0; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let mu = st.mean[c];
            centred[c] += x
                .plane(n, c)
                .iter()
                .map(|v| {
                    let e = v.as_f64() - mu;
                    e * e
                })
                .sum::<f64>();
        }
    }
    st.var = centred.iter().map(|s| s / d.per_channel() as f64).collect();
    st
}

/// Per-channel normalization coefficients in the tensor's element type.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCoeffs<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> BnCoeffs<T> {
    pub fn new(stats: &ChannelStats, p: &BnParams<T>) -> Result<Self> {
        if stats.channels() != p.channels() {
            return Err(Error::shape(format!(
                "stats for {} channels, BN params for {}",
                stats.channels(),
                p.channels()
            )));
        }
        let inv_std = (0..stats.channels())
            .map(|c| {
                let denom = (stats.var_clamped(c) + p.eps).sqrt();
                if denom > 0.0 {
                    T::cast_from(1.0 / denom)
                } else {
                    // eps = 0 on a constant channel: x̂ is 0/0; define it as 0.
                    T::zero()
                }
            })
            .collect();
        Ok(BnCoeffs {
            mean: stats.mean.iter().map(|&m| T::cast_from(m)).collect(),
            inv_std,
            gamma: p.gamma.clone(),
            beta: p.beta.clone(),
        })
    }

    #[inline]
    pub fn at(&self, c: usize) -> ChannelNorm<T> {
        ChannelNorm { mean: self.mean[c], inv_std: self.inv_std[c], gamma: self.gamma[c], beta: self.beta[c] }
    }

    #[inline]
    pub fn xhat(&self, c: usize, x: T) -> T {
        self.at(c).xhat(x)
    }

    #[inline]
    pub fn normalize(&self, c: usize, x: T) -> T {
        self.at(c).normalize(x)
    }

    #[inline]
    pub fn normalize_relu(&self, c: usize, x: T) -> T {
        self.at(c).normalize_relu(x)
    }
}

/// One channel of [`BnCoeffs`].
#[derive(Debug, Clone, Copy)]
pub struct ChannelNorm<T> {
    pub mean: T,
    pub inv_std: T,
    pub gamma: T,
    pub beta: T,
}

impl<T: Real> ChannelNorm<T> {
    #[inline]
    pub fn xhat(self, x: T) -> T {
        (x - self.mean) * self.inv_std
    }

    #[inline]
    pub fn normalize(self, x: T) -> T {
        self.gamma * self.xhat(x) + self.beta
    }

    #[inline]
    pub fn normalize_relu(self, x: T) -> T {
        let y = self.normalize(x);
        if y > T::zero() {
            y
        } else {
            T::zero()
        }
    }
}

/// `(Σdy, Σdy·x̂)` for one plane.
#[inline]
pub(crate) fn plane_dbeta_dgamma<T: Real>(dy: &[T], x: &[T], co: &BnCoeffs<T>, c: usize) -> (f64, f64) {
    let cn = co.at(c);
    let (mut db, mut dg) = ([0.0f64; LANES], [0.0f64; LANES]);
    let (dch, xch) = (dy.chunks_exact(LANES), x.chunks_exact(LANES));
    let (drest, xrest) = (dch.remainder(), xch.remainder());
    for (d, v) in dch.zip(xch) {
        for i in 0..LANES {
            let g = d[i].as_f64();
            db[i] += g;
            dg[i] += g * cn.xhat(v[i]).as_f64();
        }
    }
    for (i, (&g, &v)) in drest.iter().zip(xrest).enumerate() {
        let g = g.as_f64();
        db[i] += g;
        dg[i] += g * cn.xhat(v).as_f64();
    }
    (db.iter().sum(), dg.iter().sum())
}

/// Zeroes `dy` where the normalized input is not positive (the ReLU
/// adjoint), then returns `(Σdy, Σdy·x̂)` of the masked plane.
#[inline]
pub(crate) fn plane_relu_dbeta_dgamma<T: Real>(dy: &mut [T], x: &[T], co: &BnCoeffs<T>, c: usize) -> (f64, f64) {
    let cn = co.at(c);
    let (mut db, mut dg) = ([0.0f64; LANES], [0.0f64; LANES]);
    let step = |d: &mut T, v: T, db: &mut f64, dg: &mut f64| {
        let xh = cn.xhat(v);
        *d = if cn.gamma * xh + cn.beta > T::zero() { *d } else { T::zero() };
        let g = d.as_f64();
        *db += g;
        *dg += g * xh.as_f64();
    };
    let mut dch = dy.chunks_exact_mut(LANES);
    let xch = x.chunks_exact(LANES);
    let xrest = xch.remainder();
    for (d, v) in (&mut dch).zip(xch) {
        for i in 0..LANES {
            step(&mut d[i], v[i], &mut db[i], &mut dg[i]);
        }
    }
    for (i, (d, &v)) in dch.into_remainder().iter_mut().zip(xrest).enumerate() {
        step(d, v, &mut db[i], &mut dg[i]);
    }
    (db.iter().sum(), dg.iter().sum())
}

/// Coefficients of the input-gradient formula
/// `dx = γ·inv_std · (dy - Σdy/m - x̂·Σ(dy·x̂)/m)`.
#[derive(Debug, Clone)]
pub(crate) struct DxCoeffs<T> {
    pub scale: Vec<T>,
    pub mean_dbeta: Vec<T>,
    pub mean_dgamma: Vec<T>,
}

impl<T: Real> DxCoeffs<T> {
    pub fn new(co: &BnCoeffs<T>, dgamma: &[f64], dbeta: &[f64], count: usize) -> Self {
        let m = count as f64;
        DxCoeffs {
            scale: co.gamma.iter().zip(&co.inv_std).map(|(&g, &s)| g * s).collect(),
            mean_dbeta: dbeta.iter().map(|&v| T::cast_from(v / m)).collect(),
            mean_dgamma: dgamma.iter().map(|&v| T::cast_from(v / m)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, co: &BnCoeffs<T>, c: usize) -> ChannelDx<T> {
        ChannelDx { norm: co.at(c), scale: self.scale[c], mean_dbeta: self.mean_dbeta[c], mean_dgamma: self.mean_dgamma[c] }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ChannelDx<T> {
    norm: ChannelNorm<T>,
    scale: T,
    mean_dbeta: T,
    mean_dgamma: T,
}

impl<T: Real> ChannelDx<T> {
    #[inline]
    pub fn dx(self, dy: T, x: T) -> T {
        self.scale * (dy - self.mean_dbeta - self.norm.xhat(x) * self.mean_dgamma)
    }
}

pub(crate) fn check_stats(stats: &ChannelStats, d: Dims) -> Result<()> {
    if stats.channels() != d.c {
        return Err(Error::shape(format!("stats for {} channels applied to {d}", stats.channels())));
    }
    if stats.count != d.per_channel() {
        return Err(Error::shape(format!("stats over {} elements applied to {d}", stats.count)));
    }
    Ok(())
}

/// `y = γ·(x - mean)/sqrt(var + eps) + β`.
pub fn bn_fwd<T: Real, X: Planes<T> + ?Sized>(x: &X, stats: &ChannelStats, p: &BnParams<T>) -> Result<Tensor4D<T>> {
    bn_fwd_logged(x, stats, p, &mut PassLog::new())
}

pub(crate) fn bn_fwd_logged<T: Real, X: Planes<T> + ?Sized>(
    x: &X,
    stats: &ChannelStats,
    p: &BnParams<T>,
    log: &mut PassLog,
) -> Result<Tensor4D<T>> {
    let d = x.dims();
    check_stats(stats, d)?;
    let co = BnCoeffs::new(stats, p)?;
    log.read(Operand::Input(0));
    log.write(Operand::Output(0));
    let mut y = Tensor4D::zeros_unchecked(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let cn = co.at(c);
            for (o, &v) in y.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = cn.normalize(v);
            }
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T = f32> {
    pub dx: Tensor4D<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Parameter gradients: one sweep reading `dy` and `x`.
pub(crate) fn dgamma_dbeta_logged<T: Real, X: Planes<T> + ?Sized, D: Planes<T> + ?Sized>(
    x: &X,
    dy: &D,
    co: &BnCoeffs<T>,
    log: &mut PassLog,
) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims();
    log.read(Operand::OutputGrad(0));
    log.read(Operand::Input(0));
    let mut dgamma = vec![0.0; d.c];
    let mut dbeta = vec![0.0; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let (db, dg) = plane_dbeta_dgamma(dy.plane(n, c), x.plane(n, c), co, c);
            dbeta[c] += db;
            dgamma[c] += dg;
        }
    }
    (dgamma, dbeta)
}

/// Input gradient: a second sweep reading `dy` and `x`, writing `dx`.
pub(crate) fn bn_dx_logged<T: Real, X: Planes<T> + ?Sized, D: Planes<T> + ?Sized>(
    x: &X,
    dy: &D,
    co: &BnCoeffs<T>,
    dgamma: &[f64],
    dbeta: &[f64],
    log: &mut PassLog,
) -> Tensor4D<T> {
    let d = x.dims();
    log.read(Operand::OutputGrad(0));
    log.read(Operand::Input(0));
    log.write(Operand::InputGrad(0));
    let k = DxCoeffs::new(co, dgamma, dbeta, d.per_channel());
    let mut dx = Tensor4D::zeros_unchecked(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let (dyp, xp, kc) = (dy.plane(n, c), x.plane(n, c), k.at(co, c));
            for ((o, &g), &v) in dx.plane_mut(n, c).iter_mut().zip(dyp).zip(xp) {
                *o = kc.dx(g, v);
            }
        }
    }
    dx
}

/// Mini-batch BN adjoint through mean and variance.
pub fn bn_bwd<T: Real, X: Planes<T> + ?Sized, D: Planes<T> + ?Sized>(
    x: &X,
    dy: &D,
    stats: &ChannelStats,
    p: &BnParams<T>,
) -> Result<BnGrads<T>> {
    bn_bwd_logged(x, dy, stats, p, &mut PassLog::new())
}

pub(crate) fn bn_bwd_logged<T: Real, X: Planes<T> + ?Sized, D: Planes<T> + ?Sized>(
    x: &X,
    dy: &D,
    stats: &ChannelStats,
    p: &BnParams<T>,
    log: &mut PassLog,
) -> Result<BnGrads<T>> {
    let d = x.dims();
    same_dims(d, dy.dims(), "BN input and output gradient")?;
    check_stats(stats, d)?;
    let co = BnCoeffs::new(stats, p)?;
    let (dgamma, dbeta) = dgamma_dbeta_logged(x, dy, &co, log);
    let dx = bn_dx_logged(x, dy, &co, &dgamma, &dbeta, log);
    Ok(BnGrads {
        dx,
        dgamma: dgamma.iter().map(|&v| T::cast_from(v)).collect(),
        dbeta: dbeta.iter().map(|&v| T::cast_from(v)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn col(v: &[f64]) -> Tensor4D<f64> {
        Tensor4D::from_vec((v.len(), 1, 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn twopass_hand_values() {
        let st = bn_stats_twopass(&col(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(st.mean, vec![2.5]);
        assert_eq!(st.var, vec![1.25]);
        assert_eq!(st.count, 4);
    }

    #[test]
    fn onepass_hand_values() {
        let st = bn_stats_onepass(&col(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(st.sum_x2[0] / 4.0, 7.5);
        assert_eq!(st.mean[0] * st.mean[0], 6.25);
        assert_eq!(st.var, vec![1.25]);
    }

    #[test]
    fn constant_input_statistics() {
        let x = Tensor4D::filled((3, 1, 2, 2), 0.7f32).unwrap();
        let two = bn_stats_twopass(&x);
        assert_eq!(two.var, vec![0.0]);
        assert!((two.mean[0] - 0.7f32 as f64).abs() < 1e-12);
        let one = bn_stats_onepass(&x);
        assert!(one.var[0].abs() < 1e-12);
        assert_eq!(one.var_clamped(0).max(0.0), one.var_clamped(0));
    }

    #[test]
    fn channels_are_independent() {
        let mut x = Tensor4D::zeros((2, 2, 2, 2)).unwrap();
        for n in 0..2 {
            x.plane_mut(n, 0).fill(3.0f32);
            x.plane_mut(n, 1).fill(-5.0);
        }
        let st = bn_stats_twopass(&x);
        assert_eq!(st.mean, vec![3.0, -5.0]);
        assert_eq!(st.var, vec![0.0, 0.0]);
    }

    #[test]
    fn twopass_fills_consistent_second_moment() {
        let x: Tensor4D<f32> = Rng::new(8).uniform((4, 3, 5, 5), -10.0, 10.0).unwrap();
        let st = bn_stats_twopass(&x);
        for c in 0..3 {
            let from_sums = st.sum_x2[c] / st.count as f64 - st.mean[c] * st.mean[c];
            assert!((st.var[c] - from_sums).abs() <= 1e-4 * st.var[c].max(1.0));
        }
    }

    #[test]
    fn normalize_hand_values() {
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let st = bn_stats_twopass(&x);
        let p = BnParams::new(vec![1.0], vec![0.0], 0.0).unwrap();
        let y = bn_fwd(&x, &st, &p).unwrap();
        let want = [-1.34164, -0.44721, 0.44721, 1.34164];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_input_emits_beta() {
        let x = Tensor4D::filled((2, 1, 3, 3), 5.0f32).unwrap();
        let st = bn_stats_twopass(&x);
        let p = BnParams::new(vec![2.5], vec![3.0], 1e-5).unwrap();
        assert!(bn_fwd(&x, &st, &p).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn zero_gamma_emits_beta() {
        let x: Tensor4D<f32> = Rng::new(9).uniform((2, 2, 3, 3), -1.0, 1.0).unwrap();
        let st = bn_stats_twopass(&x);
        let p = BnParams::new(vec![0.0, 0.0], vec![0.25, -1.5], DEFAULT_EPS).unwrap();
        let y = bn_fwd(&x, &st, &p).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor4D::filled((2, 2, 1, 1), 1.0f32).unwrap();
        let st = bn_stats_twopass(&x);
        let p = BnParams::<f32>::identity(3);
        assert!(matches!(bn_fwd(&x, &st, &p), Err(Error::InvalidShape(_))));
        let dy = Tensor4D::filled((2, 2, 1, 2), 1.0f32).unwrap();
        assert!(matches!(bn_bwd(&x, &dy, &st, &BnParams::identity(2)), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn output_is_standardized() {
        let x: Tensor4D<f32> = Rng::new(10).uniform((4, 3, 6, 6), -20.0, 20.0).unwrap();
        let st = bn_stats_twopass(&x);
        let y = bn_fwd(&x, &st, &BnParams::identity(3)).unwrap();
        let out = bn_stats_twopass(&y);
        for c in 0..3 {
            assert!(out.mean[c].abs() <= 1e-5);
            assert!((out.var[c] - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let x: Tensor4D<f64> = Rng::new(11).uniform((2, 2, 2, 2), -1.0, 1.0).unwrap();
        let st = bn_stats_twopass(&x);
        let dy = Tensor4D::zeros(x.dims()).unwrap();
        let g = bn_bwd(&x, &dy, &st, &BnParams::identity(2)).unwrap();
        assert!(g.dx.data().iter().chain(&g.dgamma).chain(&g.dbeta).all(|&v| v == 0.0));
    }

    #[test]
    fn constant_upstream_gradient_vanishes() {
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        let st = bn_stats_twopass(&x);
        let g = 0.75;
        let dy = col(&[g; 4]);
        let r = bn_bwd(&x, &dy, &st, &BnParams::identity(1)).unwrap();
        assert_eq!(r.dbeta, vec![4.0 * g]);
        assert!(r.dgamma[0].abs() < 1e-12);
        assert!(r.dx.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn logged_pass_counts() {
        let x: Tensor4D<f32> = Rng::new(12).uniform((2, 2, 2, 2), -1.0, 1.0).unwrap();
        let mut log = PassLog::new();
        let st = bn_stats_twopass_logged(&x, &mut log);
        let _ = bn_fwd_logged(&x, &st, &BnParams::identity(2), &mut log).unwrap();
        assert_eq!(log.count(Operand::Input(0), crate::sweep::Access::Read), 3);
        assert_eq!(log.count(Operand::Output(0), crate::sweep::Access::Write), 1);
        let mut log = PassLog::new();
        let _ = bn_bwd_logged(&x, &x, &st, &BnParams::identity(2), &mut log).unwrap();
        assert_eq!(log.entries().len(), 5);
    }
}
