//! Trainable parameter values, stored apart from the graph so every
//! rewritten graph executes with the same numbers.

use super::{Graph, ParamId, ParamKind};
use crate::error::{Error, Result};
use crate::ops::{BnParams, ConvParams, DEFAULT_EPS};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor4D};

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue<T> {
    Conv(ConvParams<T>),
    Bn(BnParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad<T> {
    Conv { dw: Tensor4D<T>, dbias: Vec<T> },
    Bn { dgamma: Vec<T>, dbeta: Vec<T> },
}

/// One trainable scalar, addressed for finite-difference probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamScalar {
    Weight(ParamId, usize),
    Bias(ParamId, usize),
    Gamma(ParamId, usize),
    Beta(ParamId, usize),
}

impl ParamScalar {
    pub fn param(&self) -> ParamId {
        match *self {
            ParamScalar::Weight(p, _) | ParamScalar::Bias(p, _) | ParamScalar::Gamma(p, _) | ParamScalar::Beta(p, _) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    values: Vec<ParamValue<T>>,
}

impl<T: Real> ParamStore<T> {
    /// He-uniform conv weights, zero bias; γ ~ U[0.5, 1.5), β ~ U[-0.5, 0.5).
    pub fn init(graph: &Graph, rng: &mut Rng) -> Result<Self> {
        let mut values = Vec::with_capacity(graph.params().len());
        for decl in graph.params() {
            values.push(match decl.kind {
                ParamKind::Conv(geom) => {
                    let fan_in = (geom.in_c * geom.kh * geom.kw) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let w = rng.uniform(geom.weight_dims(), -bound, bound)?;
                    ParamValue::Conv(ConvParams::with_weights(geom, w)?)
                }
                ParamKind::Bn { channels } => {
                    let gamma = rng.uniform_vec(channels, 0.5, 1.5)?;
                    let beta = rng.uniform_vec(channels, -0.5, 0.5)?;
                    ParamValue::Bn(BnParams::new(gamma, beta, DEFAULT_EPS)?)
                }
            });
        }
        Ok(ParamStore { values })
    }

    /// Every conv weight and bias set to `w`, every γ to `gamma`, β to `beta`.
    pub fn constant(graph: &Graph, w: f64, gamma: f64, beta: f64) -> Result<Self> {
        let values = graph
            .params()
            .iter()
            .map(|decl| {
                Ok(match decl.kind {
                    ParamKind::Conv(geom) => ParamValue::Conv(ConvParams::new(
                        geom,
                        Tensor4D::filled(geom.weight_dims(), T::cast_from(w))?,
                        vec![T::cast_from(w); geom.out_c],
                    )?),
                    ParamKind::Bn { channels } => ParamValue::Bn(BnParams::new(
                        vec![T::cast_from(gamma); channels],
                        vec![T::cast_from(beta); channels],
                        DEFAULT_EPS,
                    )?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParamStore { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamValue<T> {
        &self.values[id.0]
    }

    pub fn conv(&self, id: ParamId) -> Result<&ConvParams<T>> {
        match self.values.get(id.0) {
            Some(ParamValue::Conv(p)) => Ok(p),
            _ => Err(Error::state(format!("parameter {} is not a convolution", id.0))),
        }
    }

    pub fn bn(&self, id: ParamId) -> Result<&BnParams<T>> {
        match self.values.get(id.0) {
            Some(ParamValue::Bn(p)) => Ok(p),
            _ => Err(Error::state(format!("parameter {} is not a BN", id.0))),
        }
    }

    pub fn bn_mut(&mut self, id: ParamId) -> Result<&mut BnParams<T>> {
        match self.values.get_mut(id.0) {
            Some(ParamValue::Bn(p)) => Ok(p),
            _ => Err(Error::state(format!("parameter {} is not a BN", id.0))),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            values: self
                .values
                .iter()
                .map(|v| match v {
                    ParamValue::Conv(p) => ParamValue::Conv(p.cast()),
                    ParamValue::Bn(p) => ParamValue::Bn(p.cast()),
                })
                .collect(),
        }
    }

    /// Total trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.scalars().len()
    }

    pub fn scalars(&self) -> Vec<ParamScalar> {
        let mut out = Vec::new();
        for (i, v) in self.values.iter().enumerate() {
            let id = ParamId(i);
            match v {
                ParamValue::Conv(p) => {
                    out.extend((0..p.weights.data().len()).map(|j| ParamScalar::Weight(id, j)));
                    out.extend((0..p.bias.len()).map(|j| ParamScalar::Bias(id, j)));
                }
                ParamValue::Bn(p) => {
                    out.extend((0..p.channels()).map(|j| ParamScalar::Gamma(id, j)));
                    out.extend((0..p.channels()).map(|j| ParamScalar::Beta(id, j)));
                }
            }
        }
        out
    }

    fn slot(&mut self, s: ParamScalar) -> &mut T {
        match (s, &mut self.values[s.param().0]) {
            (ParamScalar::Weight(_, j), ParamValue::Conv(p)) => &mut p.weights.data_mut()[j],
            (ParamScalar::Bias(_, j), ParamValue::Conv(p)) => &mut p.bias[j],
            (ParamScalar::Gamma(_, j), ParamValue::Bn(p)) => &mut p.gamma[j],
            (ParamScalar::Beta(_, j), ParamValue::Bn(p)) => &mut p.beta[j],
            _ => panic!("scalar {s:?} does not match its parameter kind"),
        }
    }

    pub fn scalar(&self, s: ParamScalar) -> T {
        match (s, &self.values[s.param().0]) {
            (ParamScalar::Weight(_, j), ParamValue::Conv(p)) => p.weights.data()[j],
            (ParamScalar::Bias(_, j), ParamValue::Conv(p)) => p.bias[j],
            (ParamScalar::Gamma(_, j), ParamValue::Bn(p)) => p.gamma[j],
            (ParamScalar::Beta(_, j), ParamValue::Bn(p)) => p.beta[j],
            _ => panic!("scalar {s:?} does not match its parameter kind"),
        }
    }

    pub fn set_scalar(&mut self, s: ParamScalar, v: T) {
        *self.slot(s) = v;
    }
}

impl<T: Real> ParamGrad<T> {
    pub(crate) fn zeros_like(v: &ParamValue<T>) -> Self {
        match v {
            ParamValue::Conv(p) => ParamGrad::Conv {
                dw: Tensor4D::zeros_unchecked(p.weights.dims()),
                dbias: vec![T::zero(); p.bias.len()],
            },
            ParamValue::Bn(p) => ParamGrad::Bn { dgamma: vec![T::zero(); p.channels()], dbeta: vec![T::zero(); p.channels()] },
        }
    }

    pub fn scalar(&self, s: ParamScalar) -> T {
        match (s, self) {
            (ParamScalar::Weight(_, j), ParamGrad::Conv { dw, .. }) => dw.data()[j],
            (ParamScalar::Bias(_, j), ParamGrad::Conv { dbias, .. }) => dbias[j],
            (ParamScalar::Gamma(_, j), ParamGrad::Bn { dgamma, .. }) => dgamma[j],
            (ParamScalar::Beta(_, j), ParamGrad::Bn { dbeta, .. }) => dbeta[j],
            _ => panic!("scalar {s:?} does not match its gradient kind"),
        }
    }

    /// All values flattened (weights then bias, or γ then β).
    pub fn flat(&self) -> Vec<T> {
        match self {
            ParamGrad::Conv { dw, dbias } => dw.data().iter().chain(dbias).copied().collect(),
            ParamGrad::Bn { dgamma, dbeta } => dgamma.iter().chain(dbeta).copied().collect(),
        }
    }
}

/// Initialized parameters, unit-normal inputs and unit-normal output
/// gradients for `graph`, all from one seed.
#[allow(clippy::type_complexity)]
pub fn synthetic<T: Real>(graph: &Graph, seed: u64) -> Result<(ParamStore<T>, Vec<Tensor4D<T>>, Vec<Tensor4D<T>>)> {
    let mut rng = Rng::new(seed);
    let params = ParamStore::init(graph, &mut rng)?;
    let xs = graph.inputs().iter().map(|&s| rng.normal(graph.map_dims(s)?)).collect::<Result<Vec<_>>>()?;
    let gys = graph.outputs().iter().map(|&s| rng.normal(graph.map_dims(s)?)).collect::<Result<Vec<_>>>()?;
    Ok((params, xs, gys))
}
