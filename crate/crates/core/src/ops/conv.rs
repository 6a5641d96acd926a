use serde::{Deserialize, Serialize};

use super::layout::Planes;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor4D};

/// Shape parameters of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry { in_c, out_c, kh: k, kw: k, stride, pad }
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.out_c, self.in_c, self.kh, self.kw)
    }

    /// 1×1, stride 1, no padding: input and output planes align element for element.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }

    /// Output dims for input `x`, or an error when channels disagree or the
    /// output would be empty.
    pub fn output_dims(&self, x: Dims) -> Result<Dims> {
        if x.c != self.in_c {
            return Err(Error::shape(format!("conv expects {} input channels, got {x}", self.in_c)));
        }
        if self.stride == 0 || self.in_c == 0 || self.out_c == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::shape(format!("degenerate convolution {self:?}")));
        }
        let span = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * self.pad;
            if padded < k {
                return Err(Error::shape(format!("kernel {k} larger than padded extent {padded}")));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok(Dims::new(x.n, self.out_c, span(x.h, self.kh)?, span(x.w, self.kw)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub geom: ConvGeometry,
    /// Dims `(out_c, in_c, kh, kw)`.
    pub weights: Tensor4D<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(geom: ConvGeometry, weights: Tensor4D<T>, bias: Vec<T>) -> Result<Self> {
        let p = ConvParams { geom, weights, bias };
        p.validate()?;
        Ok(p)
    }

    /// Zero bias.
    pub fn with_weights(geom: ConvGeometry, weights: Tensor4D<T>) -> Result<Self> {
        Self::new(geom, weights, vec![T::zero(); geom.out_c])
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.dims() != self.geom.weight_dims() {
            return Err(Error::shape(format!(
                "weights {} inconsistent with geometry {:?}",
                self.weights.dims(),
                self.geom
            )));
        }
        if self.bias.len() != self.geom.out_c {
            return Err(Error::shape(format!("bias length {} for {} channels", self.bias.len(), self.geom.out_c)));
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, oc: usize, ic: usize, kh: usize, kw: usize) -> T {
        self.weights.get(oc, ic, kh, kw)
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            geom: self.geom,
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|b| U::cast_from(b.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub dx: Tensor4D<T>,
    pub dw: Tensor4D<T>,
    pub dbias: Vec<T>,
}

/// Direct-loop convolution with zero padding.
pub fn conv2d_fwd<T: Real, X: Planes<T> + ?Sized>(x: &X, p: &ConvParams<T>) -> Result<Tensor4D<T>> {
    p.validate()?;
    let xd = x.dims();
    let yd = p.geom.output_dims(xd)?;
    let g = p.geom;
    let mut y = Tensor4D::zeros_unchecked(yd);
    for n in 0..yd.n {
        for oc in 0..yd.c {
            for oh in 0..yd.h {
                for ow in 0..yd.w {
                    let mut acc = p.bias[oc];
                    for ic in 0..g.in_c {
                        let plane = x.plane(n, ic);
                        for kh in 0..g.kh {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= xd.h as isize {
                                continue;
                            }
                            for kw in 0..g.kw {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= xd.w as isize {
                                    continue;
                                }
                                acc = acc + plane[ih as usize * xd.w + iw as usize] * p.weight(oc, ic, kh, kw);
                            }
                        }
                    }
                    y.set(n, oc, oh, ow, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`conv2d_fwd`] with respect to input, weights and bias.
pub fn conv2d_bwd<T: Real, X: Planes<T> + ?Sized, D: Planes<T> + ?Sized>(
    x: &X,
    dy: &D,
    p: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    p.validate()?;
    let xd = x.dims();
    let yd = p.geom.output_dims(xd)?;
    if dy.dims() != yd {
        return Err(Error::shape(format!("conv output gradient {} but output is {yd}", dy.dims())));
    }
    let g = p.geom;
    let mut dx = Tensor4D::zeros_unchecked(xd);
    let mut dw = Tensor4D::zeros_unchecked(g.weight_dims());
    let mut dbias = vec![T::zero(); g.out_c];
    for n in 0..yd.n {
        for oc in 0..yd.c {
            let dplane = dy.plane(n, oc);
            for oh in 0..yd.h {
                for ow in 0..yd.w {
                    let d = dplane[oh * yd.w + ow];
                    dbias[oc] = dbias[oc] + d;
                    for ic in 0..g.in_c {
                        let xplane = x.plane(n, ic);
                        for kh in 0..g.kh {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= xd.h as isize {
                                continue;
                            }
                            for kw in 0..g.kw {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= xd.w as isize {
                                    continue;
                                }
                                let (ih, iw) = (ih as usize, iw as usize);
                                let wi = dx.dims().index(n, ic, ih, iw);
                                dx.data_mut()[wi] = dx.data()[wi] + d * p.weight(oc, ic, kh, kw);
                                let di = g.weight_dims().index(oc, ic, kh, kw);
                                dw.data_mut()[di] = dw.data()[di] + d * xplane[ih * xd.w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { dx, dw, dbias })
}
