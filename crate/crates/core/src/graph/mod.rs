//! Typed layer DAG.
//!
//! Nodes read and write *slots*. A slot holds either a feature map with a
//! fixed shape or a per-channel statistics record produced by a BN
//! statistics stage. Every slot has exactly one producer (or is a graph
//! input); fan-out of feature maps goes through explicit Split nodes, the
//! only exception being the halves of one fissioned BN reading the same
//! tensor.

mod build;
mod exec;
mod model;
mod params;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, PoolGeometry};
use crate::tensor::Dims;

pub use build::GraphBuilder;
pub use exec::{backward, forward, Activations, ExecConfig, GradBundle, Pass, Trace, Value};
pub use model::{build_densenet, build_model, build_resnet, Family, ModelSpec, Scale};
pub use params::{synthetic, ParamGrad, ParamScalar, ParamStore, ParamValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotShape {
    Map(Dims),
    Stats { channels: usize, count: usize },
}

impl SlotShape {
    pub fn map(&self) -> Option<Dims> {
        match self {
            SlotShape::Map(d) => Some(*d),
            SlotShape::Stats { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub id: SlotId,
    pub shape: SlotShape,
    pub producer: Option<NodeId>,
}

/// Input transformation applied while a convolution reads its ifmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prologue {
    None,
    /// ReLU-CONV fusion: clip on read.
    Relu,
    /// Normalize with the referenced BN, clip, then convolve.
    NormRelu { bn: ParamId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNode {
    pub param: ParamId,
    pub geom: ConvGeometry,
    pub prologue: Prologue,
    /// Accumulate Σy, Σy² per output channel while writing `y`.
    pub stats_epilogue: bool,
    /// The output gradient arrives as an unresolved BN gradient and is turned
    /// into the BN input gradient while this node reads it.
    pub resolves_bn_dx: bool,
    /// Residual projection shortcut (not counted as a network layer).
    pub projection: bool,
}

impl ConvNode {
    pub fn plain(param: ParamId, geom: ConvGeometry) -> Self {
        ConvNode {
            param,
            geom,
            prologue: Prologue::None,
            stats_epilogue: false,
            resolves_bn_dx: false,
            projection: false,
        }
    }

    /// Output index of the saved post-ReLU tensor, if any.
    pub fn postrelu_output(&self) -> Option<usize> {
        matches!(self.prologue, Prologue::NormRelu { .. }).then_some(1)
    }

    pub fn stats_output(&self) -> Option<usize> {
        self.stats_epilogue.then(|| 1 + self.postrelu_output().is_some() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv(ConvNode),
    BatchNorm { param: ParamId },
    Relu,
    /// Channel concatenation of all map inputs. With `with_stats`, the
    /// trailing inputs are the statistics of each map input and a second
    /// output carries the statistics of the result.
    Concat { physical: bool, with_stats: bool, forwards_bn_dx: bool },
    /// Fan-out. `bn_dx_outputs` lists outputs whose gradient arrives as an
    /// unresolved BN gradient and is resolved during the gradient sum.
    Split { fanout: usize, bn_dx_outputs: Vec<usize> },
    EltwiseSum,
    AvgPool { geom: PoolGeometry, stats_epilogue: bool },
    /// Statistics half of a fissioned BN.
    SubBn1 { bn: ParamId, one_pass: bool, computes_dx: bool },
    /// Normalization half of a fissioned BN.
    SubBn2 { bn: ParamId },
}

/// Display/classification tag of a node kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KindTag {
    Conv2D,
    BatchNorm,
    ReLU,
    Concat,
    Split,
    EltwiseSum,
    AvgPool,
    FusedReluConv,
    FusedConvStats,
    FusedNormReluConv,
    FusedConcatStats,
    FusedPoolStats,
    FissionSubBN1,
    FissionSubBN2,
}

impl KindTag {
    pub fn name(self) -> &'static str {
        match self {
            KindTag::Conv2D => "Conv2D",
            KindTag::BatchNorm => "BatchNorm",
            KindTag::ReLU => "ReLU",
            KindTag::Concat => "Concat",
            KindTag::Split => "Split",
            KindTag::EltwiseSum => "EltwiseSum",
            KindTag::AvgPool => "AvgPool",
            KindTag::FusedReluConv => "FusedReluConv",
            KindTag::FusedConvStats => "FusedConvStats",
            KindTag::FusedNormReluConv => "FusedNormReluConv",
            KindTag::FusedConcatStats => "FusedConcatStats",
            KindTag::FusedPoolStats => "FusedPoolStats",
            KindTag::FissionSubBN1 => "FissionSubBN1",
            KindTag::FissionSubBN2 => "FissionSubBN2",
        }
    }

    /// Convolution kernels (the "CONV/FC" group); everything else is non-CONV.
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            KindTag::Conv2D | KindTag::FusedReluConv | KindTag::FusedConvStats | KindTag::FusedNormReluConv
        )
    }
}

impl fmt::Display for KindTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl LayerKind {
    pub fn tag(&self) -> KindTag {
        match self {
            LayerKind::Conv(c) => match (c.prologue, c.stats_epilogue) {
                (Prologue::NormRelu { .. }, _) => KindTag::FusedNormReluConv,
                (_, true) => KindTag::FusedConvStats,
                (Prologue::Relu, false) => KindTag::FusedReluConv,
                (Prologue::None, false) => KindTag::Conv2D,
            },
            LayerKind::BatchNorm { .. } => KindTag::BatchNorm,
            LayerKind::Relu => KindTag::ReLU,
            LayerKind::Concat { with_stats: true, .. } => KindTag::FusedConcatStats,
            LayerKind::Concat { .. } => KindTag::Concat,
            LayerKind::Split { .. } => KindTag::Split,
            LayerKind::EltwiseSum => KindTag::EltwiseSum,
            LayerKind::AvgPool { stats_epilogue: true, .. } => KindTag::FusedPoolStats,
            LayerKind::AvgPool { .. } => KindTag::AvgPool,
            LayerKind::SubBn1 { .. } => KindTag::FissionSubBN1,
            LayerKind::SubBn2 { .. } => KindTag::FissionSubBN2,
        }
    }

    /// BN parameter touched by this node, if any.
    pub fn bn_param(&self) -> Option<ParamId> {
        match self {
            LayerKind::BatchNorm { param } => Some(*param),
            LayerKind::SubBn1 { bn, .. } | LayerKind::SubBn2 { bn } => Some(*bn),
            LayerKind::Conv(ConvNode { prologue: Prologue::NormRelu { bn }, .. }) => Some(*bn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: LayerKind,
    pub inputs: Vec<SlotId>,
    pub outputs: Vec<SlotId>,
    pub label: String,
    /// Baseline nodes this node was derived from (itself for unrewritten nodes).
    pub origin: BTreeSet<NodeId>,
}

impl LayerNode {
    pub fn tag(&self) -> KindTag {
        self.kind.tag()
    }

    /// Slots whose forward values the backward pass of this node reads.
    pub fn saved_for_backward(&self) -> Vec<SlotId> {
        match &self.kind {
            LayerKind::Conv(c) => {
                let mut s = self.inputs.clone();
                if let Some(i) = c.postrelu_output() {
                    s.push(self.outputs[i]);
                }
                if c.resolves_bn_dx {
                    s.push(self.outputs[0]);
                }
                s
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu => vec![self.inputs[0]],
            LayerKind::SubBn1 { computes_dx: true, .. } => vec![self.inputs[0]],
            LayerKind::SubBn2 { .. } => self.inputs.clone(),
            LayerKind::Split { bn_dx_outputs, .. } if !bn_dx_outputs.is_empty() => vec![self.inputs[0]],
            _ => vec![],
        }
    }

    /// Feature-map inputs (excludes statistics inputs).
    pub fn map_inputs(&self) -> &[SlotId] {
        match &self.kind {
            LayerKind::Concat { with_stats: true, physical: false, .. } => &self.inputs[..self.inputs.len() / 2],
            LayerKind::Conv(ConvNode { prologue: Prologue::NormRelu { .. }, .. }) | LayerKind::SubBn2 { .. } => {
                &self.inputs[..1]
            }
            _ => &self.inputs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Conv(ConvGeometry),
    Bn { channels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub id: ParamId,
    pub kind: ParamKind,
    pub name: String,
}

impl ParamDecl {
    /// Trainable scalar count (weights + bias, or γ + β).
    pub fn scalar_count(&self) -> usize {
        match self.kind {
            ParamKind::Conv(g) => g.weight_len() + g.out_c,
            ParamKind::Bn { channels } => 2 * channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    nodes: BTreeMap<NodeId, LayerNode>,
    slots: BTreeMap<SlotId, Slot>,
    inputs: Vec<SlotId>,
    outputs: Vec<SlotId>,
    params: Vec<ParamDecl>,
    topo: Vec<NodeId>,
    next_node: usize,
    next_slot: usize,
}

impl Graph {
    pub(crate) fn empty() -> Self {
        Graph {
            nodes: BTreeMap::new(),
            slots: BTreeMap::new(),
            inputs: vec![],
            outputs: vec![],
            params: vec![],
            topo: vec![],
            next_node: 0,
            next_slot: 0,
        }
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[&id]
    }

    pub fn try_node(&self, id: NodeId) -> Option<&LayerNode> {
        self.nodes.get(&id)
    }

    /// Node ids in id order, independent of the cached topological order.
    pub(crate) fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn slot(&self, id: SlotId) -> &Slot {
        &self.slots[&id]
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.values()
    }

    pub fn inputs(&self) -> &[SlotId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[SlotId] {
        &self.outputs
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &ParamDecl {
        &self.params[id.0]
    }

    /// Nodes in cached topological order.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn nodes(&self) -> impl Iterator<Item = &LayerNode> {
        self.topo.iter().map(move |id| &self.nodes[id])
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn map_dims(&self, s: SlotId) -> Result<Dims> {
        self.slot(s)
            .shape
            .map()
            .ok_or_else(|| Error::shape(format!("slot {s} holds statistics, not a feature map")))
    }

    pub fn consumers(&self, s: SlotId) -> Vec<NodeId> {
        self.nodes().filter(|n| n.inputs.contains(&s)).map(|n| n.id).collect()
    }

    pub fn producer(&self, s: SlotId) -> Option<&LayerNode> {
        self.slot(s).producer.map(|id| self.node(id))
    }

    pub fn count_tag(&self, tag: KindTag) -> usize {
        self.nodes.values().filter(|n| n.tag() == tag).count()
    }

    /// All convolution kernels (fused or not).
    pub fn conv_count(&self) -> usize {
        self.nodes.values().filter(|n| matches!(n.kind, LayerKind::Conv(_))).count()
    }

    /// Convolutions that count as network layers (projection shortcuts excluded).
    pub fn layer_conv_count(&self) -> usize {
        self.nodes
            .values()
            .filter(|n| matches!(n.kind, LayerKind::Conv(c) if !c.projection))
            .count()
    }

    pub(crate) fn add_slot(&mut self, shape: SlotShape, producer: Option<NodeId>) -> SlotId {
        let id = SlotId(self.next_slot);
        self.next_slot += 1;
        self.slots.insert(id, Slot { id, shape, producer });
        id
    }

    pub(crate) fn fresh_node_id(&mut self) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        id
    }

    pub(crate) fn insert_node(&mut self, node: LayerNode) {
        for &o in &node.outputs {
            self.slots.get_mut(&o).expect("output slot exists").producer = Some(node.id);
        }
        self.nodes.insert(node.id, node);
    }

    pub(crate) fn remove_node(&mut self, id: NodeId) -> LayerNode {
        self.nodes.remove(&id).expect("node exists")
    }

    pub(crate) fn remove_slot(&mut self, id: SlotId) {
        self.slots.remove(&id);
    }

    pub(crate) fn push_input(&mut self, s: SlotId) {
        self.inputs.push(s);
    }

    pub(crate) fn set_outputs(&mut self, outs: Vec<SlotId>) {
        self.outputs = outs;
    }

    pub(crate) fn push_param(&mut self, kind: ParamKind, name: String) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(ParamDecl { id, kind, name });
        id
    }

    /// Recomputes the topological order (Kahn's algorithm, smallest id first
    /// among ready nodes so the order is stable).
    pub(crate) fn refresh_topo(&mut self) -> Result<()> {
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut users: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes.values() {
            let mut deps = BTreeSet::new();
            for s in &n.inputs {
                let slot = self.slots.get(s).ok_or_else(|| Error::shape(format!("{} reads missing slot {s}", n.id)))?;
                if let Some(p) = slot.producer {
                    deps.insert(p);
                }
            }
            indegree.insert(n.id, deps.len());
            for p in deps {
                users.entry(p).or_default().push(n.id);
            }
        }
        let mut ready: BTreeSet<NodeId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for u in users.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(u).expect("known node");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*u);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::InvalidSpec("graph contains a cycle".into()));
        }
        self.topo = order;
        Ok(())
    }

    /// Checks structural invariants: single producers, arity, acyclicity and
    /// per-kind shape rules.
    pub fn validate(&self) -> Result<()> {
        let mut check = self.clone();
        check.refresh_topo()?;
        if check.topo != self.topo {
            return Err(Error::InvalidSpec("cached topological order is stale".into()));
        }
        for s in self.slots.values() {
            match s.producer {
                Some(p) => {
                    let node = self.nodes.get(&p).ok_or_else(|| Error::InvalidSpec(format!("{} produced by missing {p}", s.id)))?;
                    if !node.outputs.contains(&s.id) {
                        return Err(Error::InvalidSpec(format!("{} claims producer {p}", s.id)));
                    }
                }
                None if !self.inputs.contains(&s.id) => {
                    return Err(Error::InvalidSpec(format!("{} has no producer", s.id)));
                }
                None => {}
            }
        }
        for n in self.nodes.values() {
            self.check_node(n).map_err(|e| e.at_node(n.id.0))?;
        }
        Ok(())
    }

    fn map_in(&self, n: &LayerNode, i: usize) -> Result<Dims> {
        self.map_dims(n.inputs[i])
    }

    fn stats_in(&self, n: &LayerNode, i: usize, want: Dims) -> Result<()> {
        match self.slot(n.inputs[i]).shape {
            SlotShape::Stats { channels, count } if channels == want.c && count == want.per_channel() => Ok(()),
            other => Err(Error::shape(format!("stats input {other:?} does not describe {want}"))),
        }
    }

    fn expect_out(&self, n: &LayerNode, i: usize, shape: SlotShape) -> Result<()> {
        let got = self.slot(n.outputs[i]).shape;
        if got != shape {
            return Err(Error::shape(format!("output {i} is {got:?}, expected {shape:?}")));
        }
        Ok(())
    }

    fn arity(n: &LayerNode, inputs: usize, outputs: usize) -> Result<()> {
        if n.inputs.len() != inputs || n.outputs.len() != outputs {
            return Err(Error::shape(format!(
                "{} takes {inputs} inputs / {outputs} outputs, has {} / {}",
                n.tag(),
                n.inputs.len(),
                n.outputs.len()
            )));
        }
        Ok(())
    }

    fn check_node(&self, n: &LayerNode) -> Result<()> {
        let stats_of = |d: Dims| SlotShape::Stats { channels: d.c, count: d.per_channel() };
        match &n.kind {
            LayerKind::Conv(c) => {
                let norm = matches!(c.prologue, Prologue::NormRelu { .. });
                let outs = 1 + norm as usize + c.stats_epilogue as usize;
                Self::arity(n, 1 + norm as usize, outs)?;
                let x = self.map_in(n, 0)?;
                if norm {
                    self.stats_in(n, 1, x)?;
                }
                let y = c.geom.output_dims(x)?;
                self.expect_out(n, 0, SlotShape::Map(y))?;
                if let Some(i) = c.postrelu_output() {
                    self.expect_out(n, i, SlotShape::Map(x))?;
                }
                if let Some(i) = c.stats_output() {
                    self.expect_out(n, i, stats_of(y))?;
                }
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu => {
                Self::arity(n, 1, 1)?;
                self.expect_out(n, 0, SlotShape::Map(self.map_in(n, 0)?))?;
            }
            LayerKind::SubBn1 { .. } => {
                Self::arity(n, 1, 1)?;
                self.expect_out(n, 0, stats_of(self.map_in(n, 0)?))?;
            }
            LayerKind::SubBn2 { .. } => {
                Self::arity(n, 2, 1)?;
                let x = self.map_in(n, 0)?;
                self.stats_in(n, 1, x)?;
                self.expect_out(n, 0, SlotShape::Map(x))?;
            }
            LayerKind::Concat { with_stats, physical, .. } => {
                // A view concat merges the statistics of its inputs; a physical
                // one accumulates them during the copy.
                let merged = *with_stats && !*physical;
                let k = if merged { n.inputs.len() / 2 } else { n.inputs.len() };
                if k == 0 || (merged && n.inputs.len() % 2 != 0) {
                    return Err(Error::shape("concat input arity"));
                }
                Self::arity(n, n.inputs.len(), 1 + *with_stats as usize)?;
                let first = self.map_in(n, 0)?;
                let mut c = 0;
                for i in 0..k {
                    let d = self.map_in(n, i)?;
                    if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
                        return Err(Error::shape(format!("concat inputs {first} and {d}")));
                    }
                    if merged {
                        self.stats_in(n, k + i, d)?;
                    }
                    c += d.c;
                }
                let y = first.with_c(c);
                self.expect_out(n, 0, SlotShape::Map(y))?;
                if *with_stats {
                    self.expect_out(n, 1, stats_of(y))?;
                }
            }
            LayerKind::Split { fanout, bn_dx_outputs } => {
                if *fanout < 2 {
                    return Err(Error::shape("split fanout below 2"));
                }
                Self::arity(n, 1, *fanout)?;
                let x = self.map_in(n, 0)?;
                for i in 0..*fanout {
                    self.expect_out(n, i, SlotShape::Map(x))?;
                }
                if bn_dx_outputs.iter().any(|&i| i >= *fanout) {
                    return Err(Error::shape("split resolves a missing output"));
                }
            }
            LayerKind::EltwiseSum => {
                Self::arity(n, 2, 1)?;
                let a = self.map_in(n, 0)?;
                if a != self.map_in(n, 1)? {
                    return Err(Error::shape("element-wise sum operands differ"));
                }
                self.expect_out(n, 0, SlotShape::Map(a))?;
            }
            LayerKind::AvgPool { geom, stats_epilogue } => {
                Self::arity(n, 1, 1 + *stats_epilogue as usize)?;
                let y = geom.output_dims(self.map_in(n, 0)?)?;
                self.expect_out(n, 0, SlotShape::Map(y))?;
                if *stats_epilogue {
                    self.expect_out(n, 1, stats_of(y))?;
                }
            }
        }
        Ok(())
    }

    /// Structural signature with ids renumbered by topological position;
    /// equal signatures mean isomorphic graphs.
    pub fn signature(&self) -> String {
        let mut slot_ix: BTreeMap<SlotId, usize> = BTreeMap::new();
        for &s in &self.inputs {
            let k = slot_ix.len();
            slot_ix.insert(s, k);
        }
        let mut out = String::new();
        for n in self.nodes() {
            for &s in &n.outputs {
                let k = slot_ix.len();
                slot_ix.entry(s).or_insert(k);
            }
            let ins: Vec<_> = n.inputs.iter().map(|s| slot_ix.get(s).copied()).collect();
            let outs: Vec<_> = n.outputs.iter().map(|s| slot_ix[s]).collect();
            let shapes: Vec<_> = n.outputs.iter().map(|s| self.slot(*s).shape).collect();
            out.push_str(&format!("{:?} {ins:?}->{outs:?} {shapes:?}\n", n.kind));
        }
        let outs: Vec<_> = self.outputs.iter().map(|s| slot_ix.get(s)).collect();
        out.push_str(&format!("outputs {outs:?}\n"));
        out
    }

    pub fn is_isomorphic(&self, other: &Graph) -> bool {
        self.signature() == other.signature()
    }

    /// Feature-map slot sizes in bytes for a given element width.
    pub fn slot_bytes(&self, s: SlotId, elem_bytes: usize) -> u64 {
        match self.slot(s).shape {
            SlotShape::Map(d) => (d.len() * elem_bytes) as u64,
            SlotShape::Stats { channels, .. } => (channels * 2 * 8) as u64,
        }
    }
}
