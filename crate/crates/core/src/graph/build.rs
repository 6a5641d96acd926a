use std::collections::BTreeSet;

use super::{ConvNode, Graph, LayerKind, LayerNode, NodeId, ParamId, ParamKind, SlotId, SlotShape};
use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, PoolGeometry};
use crate::tensor::Dims;

/// Incremental graph construction with shape inference.
pub struct GraphBuilder {
    g: Graph,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder { g: Graph::empty() }
    }

    pub fn input(&mut self, dims: Dims) -> Result<SlotId> {
        dims.checked_len()?;
        let s = self.g.add_slot(SlotShape::Map(dims), None);
        self.g.push_input(s);
        Ok(s)
    }

    pub fn dims(&self, s: SlotId) -> Result<Dims> {
        self.g.map_dims(s)
    }

    fn node(&mut self, kind: LayerKind, inputs: Vec<SlotId>, outs: Vec<SlotShape>, label: &str) -> Vec<SlotId> {
        let id = self.g.fresh_node_id();
        let outputs = outs.into_iter().map(|sh| self.g.add_slot(sh, Some(id))).collect::<Vec<_>>();
        self.g.insert_node(LayerNode {
            id,
            kind,
            inputs,
            outputs: outputs.clone(),
            label: label.to_string(),
            origin: BTreeSet::from([id]),
        });
        outputs
    }

    pub fn last_node(&self) -> Option<NodeId> {
        self.g.next_node.checked_sub(1).map(NodeId)
    }

    pub fn conv(&mut self, x: SlotId, out_c: usize, k: usize, stride: usize, pad: usize, label: &str) -> Result<SlotId> {
        self.conv_inner(x, out_c, k, stride, pad, false, label)
    }

    /// Residual projection shortcut.
    pub fn projection(&mut self, x: SlotId, out_c: usize, stride: usize, label: &str) -> Result<SlotId> {
        self.conv_inner(x, out_c, 1, stride, 0, true, label)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_inner(
        &mut self,
        x: SlotId,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        projection: bool,
        label: &str,
    ) -> Result<SlotId> {
        let xd = self.dims(x)?;
        let geom = ConvGeometry::new(xd.c, out_c, k, stride, pad);
        let yd = geom.output_dims(xd)?;
        let param = self.g.push_param(ParamKind::Conv(geom), label.to_string());
        let mut c = ConvNode::plain(param, geom);
        c.projection = projection;
        Ok(self.node(LayerKind::Conv(c), vec![x], vec![SlotShape::Map(yd)], label)[0])
    }

    pub fn bn(&mut self, x: SlotId, label: &str) -> Result<SlotId> {
        let xd = self.dims(x)?;
        let param = self.bn_param(xd.c, label);
        Ok(self.node(LayerKind::BatchNorm { param }, vec![x], vec![SlotShape::Map(xd)], label)[0])
    }

    fn bn_param(&mut self, channels: usize, label: &str) -> ParamId {
        self.g.push_param(ParamKind::Bn { channels }, label.to_string())
    }

    pub fn relu(&mut self, x: SlotId, label: &str) -> Result<SlotId> {
        let xd = self.dims(x)?;
        Ok(self.node(LayerKind::Relu, vec![x], vec![SlotShape::Map(xd)], label)[0])
    }

    pub fn concat(&mut self, xs: &[SlotId], physical: bool, label: &str) -> Result<SlotId> {
        let first = self.dims(*xs.first().ok_or_else(|| Error::shape("concat of zero inputs"))?)?;
        let mut c = 0;
        for &x in xs {
            let d = self.dims(x)?;
            if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(format!("concat inputs {first} and {d}")));
            }
            c += d.c;
        }
        let kind = LayerKind::Concat { physical, with_stats: false, forwards_bn_dx: false };
        Ok(self.node(kind, xs.to_vec(), vec![SlotShape::Map(first.with_c(c))], label)[0])
    }

    pub fn split(&mut self, x: SlotId, fanout: usize, label: &str) -> Result<Vec<SlotId>> {
        if fanout < 2 {
            return Err(Error::shape(format!("split fanout {fanout} must be at least 2")));
        }
        let xd = self.dims(x)?;
        let kind = LayerKind::Split { fanout, bn_dx_outputs: vec![] };
        Ok(self.node(kind, vec![x], vec![SlotShape::Map(xd); fanout], label))
    }

    pub fn ews(&mut self, a: SlotId, b: SlotId, label: &str) -> Result<SlotId> {
        let (ad, bd) = (self.dims(a)?, self.dims(b)?);
        if ad != bd {
            return Err(Error::shape(format!("element-wise sum of {ad} and {bd}")));
        }
        Ok(self.node(LayerKind::EltwiseSum, vec![a, b], vec![SlotShape::Map(ad)], label)[0])
    }

    pub fn avgpool(&mut self, x: SlotId, k: usize, stride: usize, label: &str) -> Result<SlotId> {
        let geom = PoolGeometry::new(k, stride);
        let yd = geom.output_dims(self.dims(x)?)?;
        let kind = LayerKind::AvgPool { geom, stats_epilogue: false };
        Ok(self.node(kind, vec![x], vec![SlotShape::Map(yd)], label)[0])
    }

    pub fn finish(mut self, outputs: &[SlotId]) -> Result<Graph> {
        if outputs.is_empty() {
            return Err(Error::InvalidSpec("graph without outputs".into()));
        }
        self.g.set_outputs(outputs.to_vec());
        self.g.refresh_topo()?;
        self.g.validate()?;
        Ok(self.g)
    }
}
