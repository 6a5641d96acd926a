//! Main-memory sweep accounting.
//!
//! A sweep is one full pass over a feature map (every element of the
//! mini-batch read or written once). The analytic model charges sweeps from
//! a per-kind rulebook; [`instrument_execution`] collects the passes the
//! kernels actually report, and [`compare_ledgers`] requires the two to agree
//! node for node.

mod io;
mod rules;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{plan_with, ConcatMode, FusionLevel, PlanOptions};
use crate::graph::{
    backward, build_model, forward, synthetic, ExecConfig, Graph, KindTag, LayerKind, LayerNode, ModelSpec, NodeId, ParamId,
    ParamKind, Pass, Prologue, SlotId, Trace,
};
use crate::sweep::{Access, Operand, PassLog};

pub use io::{read_csv, write_csv, write_json, TrafficRow, TrafficSummary};
pub use rules::node_rule;

/// Bytes per feature-map element in the traffic model.
pub const ELEM_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorRef {
    Act(SlotId),
    Grad(SlotId),
    Weight(ParamId),
    WeightGrad(ParamId),
}

impl TensorRef {
    pub fn is_feature_map(self) -> bool {
        matches!(self, TensorRef::Act(_) | TensorRef::Grad(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub tensor: TensorRef,
    pub access: Access,
    pub count: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Conv,
    NonConv,
}

/// Sweeps of one node in one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLedger {
    pub node: NodeId,
    pub kind: KindTag,
    pub label: String,
    pub pass: Pass,
    pub entries: Vec<SweepEntry>,
}

impl NodeLedger {
    pub fn group(&self) -> Group {
        if self.kind.is_conv() {
            Group::Conv
        } else {
            Group::NonConv
        }
    }

    fn sum(&self, fm: bool, access: Option<Access>, f: impl Fn(&SweepEntry) -> u64) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.tensor.is_feature_map() == fm && access.is_none_or(|a| a == e.access))
            .map(f)
            .sum()
    }

    /// Feature-map read sweeps.
    pub fn reads(&self) -> u64 {
        self.sum(true, Some(Access::Read), |e| e.count as u64)
    }

    pub fn writes(&self) -> u64 {
        self.sum(true, Some(Access::Write), |e| e.count as u64)
    }

    pub fn fmap_bytes(&self) -> u64 {
        self.sum(true, None, |e| e.bytes)
    }

    pub fn weight_bytes(&self) -> u64 {
        self.sum(false, None, |e| e.bytes)
    }

    /// Sweep count touching any of `slots` (activation or gradient).
    pub fn sweeps_on(&self, slots: &[SlotId]) -> u64 {
        self.entries
            .iter()
            .filter(|e| match e.tensor {
                TensorRef::Act(s) | TensorRef::Grad(s) => slots.contains(&s),
                _ => false,
            })
            .map(|e| e.count as u64)
            .sum()
    }
}

/// Per-node sweep ledgers, forward nodes in topological order followed by
/// backward nodes in reverse order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepLedger {
    pub nodes: Vec<NodeLedger>,
}

impl SweepLedger {
    pub fn pass(&self, pass: Pass) -> impl Iterator<Item = &NodeLedger> {
        self.nodes.iter().filter(move |n| n.pass == pass)
    }

    pub fn get(&self, node: NodeId, pass: Pass) -> Option<&NodeLedger> {
        self.nodes.iter().find(|n| n.node == node && n.pass == pass)
    }

    pub fn sweeps_on(&self, slots: &[SlotId], pass: Pass) -> u64 {
        self.pass(pass).map(|n| n.sweeps_on(slots)).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub sweeps: u64,
    pub fmap_bytes: u64,
    pub weight_bytes: u64,
}

impl Totals {
    pub fn bytes(&self) -> u64 {
        self.fmap_bytes + self.weight_bytes
    }

    fn add(&mut self, n: &NodeLedger) {
        self.sweeps += n.reads() + n.writes();
        self.fmap_bytes += n.fmap_bytes();
        self.weight_bytes += n.weight_bytes();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub level: FusionLevel,
    pub ledger: SweepLedger,
    pub forward: Totals,
    pub backward: Totals,
    pub conv: Totals,
    pub non_conv: Totals,
    /// Bytes moved by standalone ReLU nodes, both passes.
    pub relu_bytes: u64,
    /// `1 - total/baseline_total`, in percent, once a baseline is attached.
    pub reduction_pct: Option<f64>,
}

impl TrafficReport {
    pub fn from_ledger(level: FusionLevel, ledger: SweepLedger) -> Self {
        let mut r = TrafficReport {
            level,
            ledger: SweepLedger::default(),
            forward: Totals::default(),
            backward: Totals::default(),
            conv: Totals::default(),
            non_conv: Totals::default(),
            relu_bytes: 0,
            reduction_pct: None,
        };
        for n in &ledger.nodes {
            match n.pass {
                Pass::Forward => r.forward.add(n),
                Pass::Backward => r.backward.add(n),
            }
            match n.group() {
                Group::Conv => r.conv.add(n),
                Group::NonConv => r.non_conv.add(n),
            }
            if n.kind == KindTag::ReLU {
                r.relu_bytes += n.fmap_bytes() + n.weight_bytes();
            }
        }
        r.ledger = ledger;
        r
    }

    pub fn total(&self) -> Totals {
        Totals {
            sweeps: self.forward.sweeps + self.backward.sweeps,
            fmap_bytes: self.forward.fmap_bytes + self.backward.fmap_bytes,
            weight_bytes: self.forward.weight_bytes + self.backward.weight_bytes,
        }
    }

    pub fn pass_totals(&self, pass: Pass) -> Totals {
        match pass {
            Pass::Forward => self.forward,
            Pass::Backward => self.backward,
        }
    }

    /// ReLU bytes over all bytes (feature maps and weights), in percent.
    pub fn relu_share_pct(&self) -> f64 {
        100.0 * self.relu_bytes as f64 / self.total().bytes() as f64
    }

    pub fn reduction_vs(&self, baseline: &TrafficReport) -> f64 {
        100.0 * (1.0 - self.total().bytes() as f64 / baseline.total().bytes() as f64)
    }

    pub fn with_baseline(mut self, baseline: &TrafficReport) -> Self {
        self.reduction_pct = Some(self.reduction_vs(baseline));
        self
    }
}

fn param_of(node: &LayerNode) -> Option<ParamId> {
    match node.kind {
        LayerKind::Conv(c) => Some(c.param),
        _ => None,
    }
}

fn tensor_of(node: &LayerNode, op: Operand) -> Result<TensorRef> {
    let pick = |v: &[SlotId], i: usize| {
        v.get(i).copied().ok_or_else(|| Error::state(format!("{} has no operand {op:?}", node.tag().name())))
    };
    let weight = || param_of(node).ok_or_else(|| Error::state(format!("{} has no weights", node.tag().name())));
    Ok(match op {
        Operand::Input(i) => TensorRef::Act(pick(&node.inputs, i)?),
        Operand::Output(i) => TensorRef::Act(pick(&node.outputs, i)?),
        Operand::OutputGrad(i) => TensorRef::Grad(pick(&node.outputs, i)?),
        Operand::InputGrad(i) => TensorRef::Grad(pick(&node.inputs, i)?),
        Operand::Weight => TensorRef::Weight(weight()?),
        Operand::WeightGrad => TensorRef::WeightGrad(weight()?),
    })
}

fn tensor_bytes(graph: &Graph, t: TensorRef) -> Result<u64> {
    match t {
        TensorRef::Act(s) | TensorRef::Grad(s) => Ok(graph.map_dims(s)?.len() as u64 * ELEM_BYTES),
        TensorRef::Weight(p) | TensorRef::WeightGrad(p) => match graph.param(p).kind {
            ParamKind::Conv(_) => Ok(graph.param(p).scalar_count() as u64 * ELEM_BYTES),
            ParamKind::Bn { .. } => Err(Error::InvalidSpec(format!("BN parameter {} swept as a weight tensor", p.0))),
        },
    }
}

/// Folds a list of passes into one entry per (tensor, access).
fn node_ledger(graph: &Graph, node: &LayerNode, pass: Pass, ops: &[(Operand, Access)]) -> Result<NodeLedger> {
    let mut counts: BTreeMap<(TensorRef, Access), u32> = BTreeMap::new();
    for &(op, a) in ops {
        *counts.entry((tensor_of(node, op)?, a)).or_default() += 1;
    }
    let entries = counts
        .into_iter()
        .map(|((tensor, access), count)| {
            Ok(SweepEntry { tensor, access, count, bytes: count as u64 * tensor_bytes(graph, tensor)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NodeLedger { node: node.id, kind: node.tag(), label: node.label.clone(), pass, entries })
}

/// Analytic ledger of one forward+backward iteration.
pub fn analytic_ledger(graph: &Graph) -> Result<SweepLedger> {
    let mut nodes = vec![];
    for n in graph.nodes() {
        nodes.push(node_ledger(graph, n, Pass::Forward, &node_rule(n, Pass::Forward))?);
    }
    for &id in graph.topo_order().iter().rev() {
        let n = graph.node(id);
        nodes.push(node_ledger(graph, n, Pass::Backward, &node_rule(n, Pass::Backward))?);
    }
    Ok(SweepLedger { nodes })
}

/// Ledger built from the pass logs recorded during execution.
pub fn measured_ledger(graph: &Graph, fwd: &Trace, bwd: &Trace) -> Result<SweepLedger> {
    let empty = PassLog::new();
    let mut nodes = vec![];
    for n in graph.nodes() {
        let log = fwd.logs.get(&n.id).unwrap_or(&empty);
        nodes.push(node_ledger(graph, n, Pass::Forward, log.entries())?);
    }
    for &id in graph.topo_order().iter().rev() {
        let n = graph.node(id);
        let log = bwd.logs.get(&id).unwrap_or(&empty);
        nodes.push(node_ledger(graph, n, Pass::Backward, log.entries())?);
    }
    Ok(SweepLedger { nodes })
}

pub fn count_sweeps(graph: &Graph, level: FusionLevel) -> Result<TrafficReport> {
    Ok(TrafficReport::from_ledger(level, analytic_ledger(graph)?))
}

/// Runs one forward+backward iteration on synthetic data and returns the
/// sweeps the kernels reported.
pub fn instrument_execution(graph: &Graph, seed: u64) -> Result<SweepLedger> {
    let (params, inputs, grads) = synthetic::<f32>(graph, seed)?;
    let cfg = ExecConfig::default();
    let acts = forward(graph, &params, &inputs, &cfg)?;
    let gb = backward(graph, &params, &acts, &grads, &cfg)?;
    measured_ledger(graph, &acts.trace, &gb.trace)
}

/// Requires identical entries for every (node, pass); the error names the
/// first node that differs.
pub fn compare_ledgers(analytic: &SweepLedger, measured: &SweepLedger) -> Result<()> {
    if analytic.nodes.len() != measured.nodes.len() {
        return Err(Error::Mismatch(format!(
            "{} analytic node ledgers vs {} measured",
            analytic.nodes.len(),
            measured.nodes.len()
        )));
    }
    for (a, m) in analytic.nodes.iter().zip(&measured.nodes) {
        if a.node != m.node || a.pass != m.pass {
            return Err(Error::Mismatch(format!("ledger order differs at {} {} vs {} {}", a.node, a.pass.name(), m.node, m.pass.name())));
        }
        if a.entries != m.entries {
            return Err(Error::Mismatch(format!(
                "first divergent node {} {} '{}' ({}): analytic {:?} measured {:?}",
                a.node,
                a.kind.name(),
                a.label,
                a.pass.name(),
                a.entries,
                m.entries
            )));
        }
    }
    Ok(())
}

/// Traffic of `spec` at every level in `levels`, each with its reduction
/// against Baseline.
pub fn report_model(spec: &ModelSpec, levels: &[FusionLevel], opts: PlanOptions) -> Result<Vec<TrafficReport>> {
    let g = build_model(spec)?;
    let (bg, _) = plan_with(&g, FusionLevel::Baseline, opts)?;
    let base = count_sweeps(&bg, FusionLevel::Baseline)?;
    levels
        .iter()
        .map(|&l| {
            let (fg, _) = plan_with(&g, l, opts)?;
            Ok(count_sweeps(&fg, l)?.with_baseline(&base))
        })
        .collect()
}

/// Full-shape DenseNet-121 traffic at one level. Concat runs as a view at
/// every level, Baseline included, so the reduction measures BN/ReLU
/// changes only.
pub fn report_densenet121(batch: usize, level: FusionLevel) -> Result<TrafficReport> {
    let opts = PlanOptions { concat: ConcatMode::Views };
    Ok(report_model(&ModelSpec::densenet121(batch), &[level], opts)?.remove(0))
}

/// Slots between the convolution that feeds a BatchNorm and the
/// convolution that consumes its ReLU, for one CONV→BN→ReLU→CONV chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BnNeighborhood {
    pub bn: NodeId,
    pub param: ParamId,
    /// Conv output read by the BN.
    pub input: SlotId,
    pub slots: Vec<SlotId>,
}

/// Every CONV→BN→ReLU→CONV chain of an unrewritten graph.
pub fn bn_neighborhoods(baseline: &Graph) -> Vec<BnNeighborhood> {
    let sole = |s: SlotId| {
        let c = baseline.consumers(s);
        (c.len() == 1 && !baseline.outputs().contains(&s)).then(|| baseline.node(c[0]))
    };
    let mut out = vec![];
    for n in baseline.nodes() {
        let LayerKind::BatchNorm { param } = n.kind else { continue };
        let x = n.inputs[0];
        let from_conv = baseline.producer(x).is_some_and(|p| p.tag().is_conv());
        let Some(relu) = sole(n.outputs[0]).filter(|r| matches!(r.kind, LayerKind::Relu)) else { continue };
        let Some(conv) = sole(relu.outputs[0]) else { continue };
        if from_conv && conv.tag().is_conv() && sole(x).is_some() {
            out.push(BnNeighborhood { bn: n.id, param, input: x, slots: vec![x, n.outputs[0], relu.outputs[0]] });
        }
    }
    out
}

/// The same neighborhood in a rewritten graph: the BN input plus every
/// feature map produced on the way to the consuming convolution.
pub fn fused_neighborhood_slots(fused: &Graph, nb: &BnNeighborhood) -> Vec<SlotId> {
    let mut slots = vec![nb.input];
    for n in fused.nodes() {
        match n.kind {
            LayerKind::Conv(c) if c.prologue == (Prologue::NormRelu { bn: nb.param }) => {
                slots.extend(c.postrelu_output().map(|i| n.outputs[i]));
            }
            LayerKind::BatchNorm { param } | LayerKind::SubBn2 { bn: param } if param == nb.param => {
                slots.push(n.outputs[0]);
                if let Some(r) = fused.consumers(n.outputs[0]).first() {
                    let r = fused.node(*r);
                    if matches!(r.kind, LayerKind::Relu) {
                        slots.push(r.outputs[0]);
                    }
                }
            }
            _ => {}
        }
    }
    slots
}

#[cfg(test)]
mod tests;
