use std::collections::{BTreeMap, BTreeSet};

use super::{Rewrite, RewriteKind};
use crate::error::Result;
use crate::graph::{ConvNode, Graph, LayerKind, LayerNode, NodeId, Prologue, SlotId, SlotShape};

/// Mutable working copy of a graph plus the audit log of applied rewrites.
pub(super) struct Rewriter {
    g: Graph,
    log: Vec<Rewrite>,
    /// Current node → nodes of the input graph it derives from.
    anc: BTreeMap<NodeId, BTreeSet<NodeId>>,
    /// Replacements made while one ICF rewrite is being assembled.
    batch: Option<Batch>,
}

#[derive(Default)]
struct Batch {
    matched: Vec<NodeId>,
    desc: Vec<String>,
    replacement: Vec<NodeId>,
}

fn describe(n: &LayerNode) -> String {
    format!("{} '{}'", n.tag().name(), n.label)
}

fn conv_outputs(c: &ConvNode, y: SlotId, post: Option<SlotId>, stats: Option<SlotId>) -> Vec<SlotId> {
    let mut out = vec![y];
    if matches!(c.prologue, Prologue::NormRelu { .. }) {
        out.push(post.expect("post-ReLU slot for normalize-ReLU conv"));
    }
    if c.stats_epilogue {
        out.push(stats.expect("statistics slot for stats epilogue"));
    }
    out
}

fn conv_parts(n: &LayerNode) -> (ConvNode, SlotId, Option<SlotId>, Option<SlotId>) {
    match n.kind {
        LayerKind::Conv(c) => {
            (c, n.outputs[0], c.postrelu_output().map(|i| n.outputs[i]), c.stats_output().map(|i| n.outputs[i]))
        }
        _ => unreachable!("conv_parts on {}", n.tag()),
    }
}

impl Rewriter {
    pub fn new(g: &Graph) -> Self {
        let anc = g.node_ids().into_iter().map(|id| (id, BTreeSet::from([id]))).collect();
        Rewriter { g: g.clone(), log: vec![], anc, batch: None }
    }

    pub fn log(&self) -> &[Rewrite] {
        &self.log
    }

    pub fn finish(mut self) -> Result<Graph> {
        self.g.refresh_topo()?;
        self.g.validate()?;
        Ok(self.g)
    }

    pub fn finish_with_ancestry(mut self) -> Result<(Graph, BTreeMap<NodeId, BTreeSet<NodeId>>)> {
        self.g.refresh_topo()?;
        self.g.validate()?;
        Ok((self.g, self.anc))
    }

    fn ids_where(&self, f: impl Fn(&LayerNode) -> bool) -> Vec<NodeId> {
        self.g.node_ids().into_iter().filter(|&id| f(self.g.node(id))).collect()
    }

    fn consumers(&self, s: SlotId) -> Vec<NodeId> {
        self.ids_where(|n| n.inputs.contains(&s))
    }

    fn is_output(&self, s: SlotId) -> bool {
        self.g.outputs().contains(&s)
    }

    fn producer(&self, s: SlotId) -> Option<&LayerNode> {
        self.g.slot(s).producer.and_then(|id| self.g.try_node(id))
    }

    fn stats_slot(&mut self, of: SlotId) -> SlotId {
        let d = self.g.map_dims(of).expect("feature-map slot");
        self.g.add_slot(SlotShape::Stats { channels: d.c, count: d.per_channel() }, None)
    }

    /// Replaces `old` nodes by freshly numbered nodes.
    fn replace(
        &mut self,
        kind: RewriteKind,
        old: &[NodeId],
        new: Vec<(LayerKind, Vec<SlotId>, Vec<SlotId>, String)>,
    ) -> Vec<NodeId> {
        let mut origin = BTreeSet::new();
        let mut anc = BTreeSet::new();
        let mut desc = vec![];
        for id in old {
            let n = self.g.remove_node(*id);
            desc.push(describe(&n));
            origin.extend(n.origin);
            anc.extend(self.anc.remove(id).unwrap_or_default());
        }
        let mut ids = vec![];
        for (k, inputs, outputs, label) in new {
            let id = self.g.fresh_node_id();
            self.g.insert_node(LayerNode { id, kind: k, inputs, outputs, label, origin: origin.clone() });
            self.anc.insert(id, anc.clone());
            ids.push(id);
        }
        match self.batch.as_mut() {
            Some(b) => {
                for (id, d) in old.iter().zip(desc) {
                    // A node created earlier in this batch is internal to it.
                    if let Some(p) = b.replacement.iter().position(|r| r == id) {
                        b.replacement.remove(p);
                    } else {
                        b.matched.push(*id);
                        b.desc.push(d);
                    }
                }
                b.replacement.extend(ids.iter().copied());
            }
            None => {
                self.log.push(Rewrite { kind, matched: old.to_vec(), matched_desc: desc, replacement: ids.clone() })
            }
        }
        ids
    }

    fn replace_one(&mut self, kind: RewriteKind, old: &[NodeId], k: LayerKind, ins: Vec<SlotId>, outs: Vec<SlotId>, label: String) -> NodeId {
        self.replace(kind, old, vec![(k, ins, outs, label)])[0]
    }

    pub fn concat_views(&mut self) {
        for id in self.ids_where(|n| matches!(n.kind, LayerKind::Concat { physical: true, .. })) {
            let n = self.g.node(id).clone();
            let LayerKind::Concat { with_stats, forwards_bn_dx, .. } = n.kind else { unreachable!() };
            if with_stats {
                continue;
            }
            let k = LayerKind::Concat { physical: false, with_stats, forwards_bn_dx };
            self.replace_one(RewriteKind::ConcatView, &[id], k, n.inputs, n.outputs, n.label);
        }
    }

    /// ReLU whose output feeds only the data input of a plain-prologue conv.
    pub fn rcf(&mut self) {
        for id in self.ids_where(|n| matches!(n.kind, LayerKind::Relu)) {
            let relu = self.g.node(id).clone();
            let s = relu.outputs[0];
            if self.is_output(s) {
                continue;
            }
            let cons = self.consumers(s);
            let [cid] = cons[..] else { continue };
            let conv = self.g.node(cid).clone();
            let LayerKind::Conv(mut c) = conv.kind else { continue };
            if c.prologue != Prologue::None || conv.inputs != [s] {
                continue;
            }
            c.prologue = Prologue::Relu;
            self.replace_one(RewriteKind::Rcf, &[id, cid], LayerKind::Conv(c), relu.inputs.clone(), conv.outputs, conv.label);
            self.g.remove_slot(s);
        }
    }

    pub fn fission(&mut self) {
        for id in self.ids_where(|n| matches!(n.kind, LayerKind::BatchNorm { .. })) {
            let n = self.g.node(id).clone();
            let LayerKind::BatchNorm { param } = n.kind else { unreachable!() };
            let (x, y) = (n.inputs[0], n.outputs[0]);
            let st = self.stats_slot(x);
            self.replace(
                RewriteKind::Fission,
                &[id],
                vec![
                    (
                        LayerKind::SubBn1 { bn: param, one_pass: false, computes_dx: true },
                        vec![x],
                        vec![st],
                        format!("{}.stats", n.label),
                    ),
                    (LayerKind::SubBn2 { bn: param }, vec![x, st], vec![y], format!("{}.norm", n.label)),
                ],
            );
        }
    }

    pub fn mvf(&mut self) {
        for id in self.ids_where(|n| matches!(n.kind, LayerKind::SubBn1 { one_pass: false, .. })) {
            let n = self.g.node(id).clone();
            let LayerKind::SubBn1 { bn, computes_dx, .. } = n.kind else { unreachable!() };
            let k = LayerKind::SubBn1 { bn, one_pass: true, computes_dx };
            self.replace_one(RewriteKind::Mvf, &[id], k, n.inputs, n.outputs, n.label);
        }
    }

    pub fn bnff(&mut self) {
        self.rcf();
        self.fission();
        self.mvf();
        self.conv_stats();
        self.norm_relu_conv();
    }

    /// The one consumer of BN input `x` other than its statistics node, when
    /// that consumer is the normalization half of the same BN.
    fn sole_norm_consumer(&self, x: SlotId, stats_node: NodeId, bn: crate::graph::ParamId) -> Option<NodeId> {
        let others: Vec<_> = self.consumers(x).into_iter().filter(|&c| c != stats_node).collect();
        let [o] = others[..] else { return None };
        let n = self.g.node(o);
        let ok = match n.kind {
            LayerKind::SubBn2 { bn: b } => b == bn,
            LayerKind::Conv(ConvNode { prologue: Prologue::NormRelu { bn: b }, .. }) => b == bn,
            _ => false,
        };
        (ok && n.inputs[0] == x).then_some(o)
    }

    /// Sub-BN1 folded into the convolution producing its input.
    fn conv_stats(&mut self) {
        for id in self.ids_where(|n| matches!(n.kind, LayerKind::SubBn1 { .. })) {
            let b = self.g.node(id).clone();
            let LayerKind::SubBn1 { bn, computes_dx, .. } = b.kind else { unreachable!() };
            let (x, st) = (b.inputs[0], b.outputs[0]);
            if self.is_output(x) || self.sole_norm_consumer(x, id, bn).is_none() {
                continue;
            }
            let Some(p) = self.producer(x).cloned() else { continue };
            let LayerKind::Conv(mut c) = p.kind else { continue };
            if c.stats_epilogue || c.resolves_bn_dx || p.outputs[0] != x {
                continue;
            }
            let (_, y, post, _) = conv_parts(&p);
            c.stats_epilogue = true;
            c.resolves_bn_dx = computes_dx;
            let outs = conv_outputs(&c, y, post, Some(st));
            self.replace_one(RewriteKind::ConvStats, &[p.id, id], LayerKind::Conv(c), p.inputs, outs, p.label);
        }
    }

    /// Sub-BN2 folded, with the already-fused ReLU, into the consuming conv.
    fn norm_relu_conv(&mut self) {
        for id in self.ids_where(|n| matches!(n.kind, LayerKind::SubBn2 { .. })) {
            let s2 = self.g.node(id).clone();
            let LayerKind::SubBn2 { bn } = s2.kind else { unreachable!() };
            let y = s2.outputs[0];
            if self.is_output(y) {
                continue;
            }
            let cons = self.consumers(y);
            let [cid] = cons[..] else { continue };
            let conv = self.g.node(cid).clone();
            let LayerKind::Conv(mut c) = conv.kind else { continue };
            if c.prologue != Prologue::Relu || conv.inputs != [y] {
                continue;
            }
            let (_, cy, _, stats) = conv_parts(&conv);
            let x = s2.inputs[0];
            let post = self.g.add_slot(SlotShape::Map(self.g.map_dims(x).expect("map")), None);
            c.prologue = Prologue::NormRelu { bn };
            let outs = conv_outputs(&c, cy, Some(post), stats);
            self.replace_one(RewriteKind::NormReluConv, &[id, cid], LayerKind::Conv(c), s2.inputs.clone(), outs, conv.label);
            self.g.remove_slot(y);
        }
    }

    /// Statistics of `s` already produced as a by-product of some write.
    fn find_stats(&self, s: SlotId) -> Option<SlotId> {
        let p = self.producer(s)?;
        match &p.kind {
            LayerKind::Split { .. } => self.find_stats(p.inputs[0]),
            LayerKind::Conv(c) if p.outputs[0] == s => c.stats_output().map(|i| p.outputs[i]),
            LayerKind::AvgPool { stats_epilogue: true, .. } | LayerKind::Concat { with_stats: true, .. } => {
                Some(p.outputs[1])
            }
            _ => None,
        }
    }

    fn stats_feasible(&self, s: SlotId) -> bool {
        if self.find_stats(s).is_some() {
            return true;
        }
        let Some(p) = self.producer(s) else { return false };
        match &p.kind {
            LayerKind::Split { .. } => self.stats_feasible(p.inputs[0]),
            LayerKind::Conv(_) | LayerKind::AvgPool { .. } => p.outputs[0] == s,
            LayerKind::Concat { physical: true, .. } => true,
            LayerKind::Concat { physical: false, .. } => p.map_inputs().iter().all(|&m| self.stats_feasible(m)),
            _ => false,
        }
    }

    fn ensure_stats(&mut self, s: SlotId) -> SlotId {
        if let Some(st) = self.find_stats(s) {
            return st;
        }
        let p = self.producer(s).expect("feasible statistics have a producer").clone();
        match p.kind.clone() {
            LayerKind::Split { .. } => self.ensure_stats(p.inputs[0]),
            LayerKind::Conv(mut c) => {
                let (_, y, post, _) = conv_parts(&p);
                let st = self.stats_slot(y);
                c.stats_epilogue = true;
                let outs = conv_outputs(&c, y, post, Some(st));
                self.replace_one(RewriteKind::IcfStats, &[p.id], LayerKind::Conv(c), p.inputs, outs, p.label);
                st
            }
            LayerKind::AvgPool { geom, .. } => {
                let st = self.stats_slot(s);
                let k = LayerKind::AvgPool { geom, stats_epilogue: true };
                self.replace_one(RewriteKind::IcfStats, &[p.id], k, p.inputs, vec![s, st], p.label);
                st
            }
            LayerKind::Concat { physical, forwards_bn_dx, .. } => {
                let maps = p.map_inputs().to_vec();
                let mut inputs = maps.clone();
                if !physical {
                    for &m in &maps {
                        let ms = self.ensure_stats(m);
                        inputs.push(ms);
                    }
                }
                let st = self.stats_slot(s);
                let k = LayerKind::Concat { physical, with_stats: true, forwards_bn_dx };
                // The concat node itself is unchanged by the recursion above.
                self.replace_one(RewriteKind::IcfStats, &[p.id], k, inputs, vec![s, st], p.label);
                st
            }
            other => unreachable!("statistics requested from {:?}", other),
        }
    }

    fn routable(&self, s: SlotId) -> bool {
        let Some(p) = self.producer(s) else { return false };
        match &p.kind {
            LayerKind::Split { .. } => true,
            LayerKind::Conv(c) => p.outputs[0] == s && !c.resolves_bn_dx,
            LayerKind::Concat { physical: false, forwards_bn_dx: false, .. } => p
                .map_inputs()
                .iter()
                .all(|&m| self.consumers(m).len() == 1 && !self.is_output(m) && self.routable(m)),
            _ => false,
        }
    }

    fn route(&mut self, s: SlotId) {
        let p = self.producer(s).expect("routable slot has a producer").clone();
        match p.kind.clone() {
            LayerKind::Split { fanout, mut bn_dx_outputs } => {
                let i = p.outputs.iter().position(|&o| o == s).expect("split output");
                bn_dx_outputs.push(i);
                bn_dx_outputs.sort_unstable();
                bn_dx_outputs.dedup();
                let k = LayerKind::Split { fanout, bn_dx_outputs };
                self.replace_one(RewriteKind::IcfBackward, &[p.id], k, p.inputs, p.outputs, p.label);
            }
            LayerKind::Conv(mut c) => {
                c.resolves_bn_dx = true;
                self.replace_one(RewriteKind::IcfBackward, &[p.id], LayerKind::Conv(c), p.inputs, p.outputs, p.label);
            }
            LayerKind::Concat { physical, with_stats, .. } => {
                for m in p.map_inputs().to_vec() {
                    self.route(m);
                }
                let p = self.producer(s).expect("concat still produces").clone();
                let k = LayerKind::Concat { physical, with_stats, forwards_bn_dx: true };
                self.replace_one(RewriteKind::IcfBackward, &[p.id], k, p.inputs, p.outputs, p.label);
            }
            other => unreachable!("BN gradient routed to {:?}", other),
        }
    }

    /// Inter-composite-layer fusion of the remaining standalone sub-BN1 nodes.
    pub fn icf(&mut self) {
        for id in self.ids_where(|n| matches!(n.kind, LayerKind::SubBn1 { .. })) {
            let b = self.g.node(id).clone();
            let LayerKind::SubBn1 { bn, one_pass, computes_dx } = b.kind else { unreachable!() };
            let (x, st) = (b.inputs[0], b.outputs[0]);
            let norm = self.sole_norm_consumer(x, id, bn);
            let bwd = computes_dx && norm.is_some() && !self.is_output(x) && self.routable(x);
            let fwd = self.stats_feasible(x) && (bwd || !computes_dx);
            if !bwd && !fwd {
                continue;
            }
            self.batch = Some(Batch::default());
            if bwd {
                self.route(x);
            }
            if fwd {
                let merged = self.ensure_stats(x);
                for c in self.consumers(st) {
                    if c == id {
                        continue;
                    }
                    let mut n = self.g.remove_node(c);
                    for i in n.inputs.iter_mut().filter(|i| **i == st) {
                        *i = merged;
                    }
                    self.g.insert_node(n);
                }
                self.replace(RewriteKind::IcfStats, &[id], vec![]);
                self.g.remove_slot(st);
            } else {
                let k = LayerKind::SubBn1 { bn, one_pass, computes_dx: false };
                self.replace_one(RewriteKind::IcfBackward, &[id], k, b.inputs, b.outputs, b.label);
            }
            let b = self.batch.take().expect("batch open");
            let kind = if fwd { RewriteKind::IcfStats } else { RewriteKind::IcfBackward };
            self.log.push(Rewrite { kind, matched: b.matched, matched_desc: b.desc, replacement: b.replacement });
        }
    }
}
