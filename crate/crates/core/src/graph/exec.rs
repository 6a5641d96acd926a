//! Topological forward and reverse-topological backward execution.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Graph, LayerKind, LayerNode, NodeId, ParamGrad, ParamStore, Prologue, SlotId};
use crate::error::{Error, Result};
use crate::fmap::FeatureMap;
use crate::kernels::{
    conv_bwd_logged, conv_fwd_logged, fused_concat_stats_fwd_logged, fused_pool_stats_fwd_logged,
    fused_split_bwd_bn_dx_logged, sub_bn1_bwd_logged, sub_bn2_bwd_logged, ConvGradIn, ConvPrologue, GradValue,
    KernelConfig, PendingBnGrad,
};
use crate::ops::{
    avgpool_bwd_logged, avgpool_fwd_logged, bn_bwd_logged, bn_fwd_logged, bn_stats_onepass_logged,
    bn_stats_twopass_logged, concat_bwd_logged, concat_fwd_logged, ews_bwd, ews_fwd_logged, relu_bwd_logged,
    relu_fwd_logged, split_bwd_logged, BnCoeffs, ChannelStats,
};
use crate::sweep::PassLog;
use crate::tensor::{Real, Tensor4D};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecConfig {
    pub kernel: KernelConfig,
    /// Keep every activation, not only those needed by backward.
    pub keep_all: bool,
    /// Record per-node wall time.
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Pass::Forward => "fwd",
            Pass::Backward => "bwd",
        }
    }
}

/// Per-node pass logs and timings of one execution.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub logs: BTreeMap<NodeId, PassLog>,
    pub times: Vec<(NodeId, Duration)>,
}

#[derive(Debug, Clone)]
pub enum Value<T> {
    Map(FeatureMap<T>),
    Stats(Arc<ChannelStats>),
}

#[derive(Debug, Clone)]
pub struct Activations<T> {
    values: HashMap<SlotId, Value<T>>,
    bn_stats: HashMap<NodeId, Arc<ChannelStats>>,
    outputs: Vec<SlotId>,
    pub trace: Trace,
}

impl<T: Real> Activations<T> {
    pub fn get(&self, s: SlotId) -> Option<&Value<T>> {
        self.values.get(&s)
    }

    pub fn map(&self, s: SlotId) -> Result<&FeatureMap<T>> {
        match self.values.get(&s) {
            Some(Value::Map(m)) => Ok(m),
            Some(Value::Stats(_)) => Err(Error::state(format!("slot {s} holds statistics"))),
            None => Err(Error::state(format!("activation {s} was not retained"))),
        }
    }

    pub fn stats(&self, s: SlotId) -> Result<&ChannelStats> {
        match self.values.get(&s) {
            Some(Value::Stats(st)) => Ok(st),
            Some(Value::Map(_)) => Err(Error::state(format!("slot {s} holds a feature map"))),
            None => Err(Error::state(format!("statistics {s} were not retained"))),
        }
    }

    pub fn slots(&self) -> BTreeSet<SlotId> {
        self.values.keys().copied().collect()
    }

    pub fn outputs(&self) -> Result<Vec<Tensor4D<T>>> {
        self.outputs.iter().map(|&s| Ok(self.map(s)?.to_tensor())).collect()
    }

    /// Drops a retained activation (used to test missing-state handling).
    pub fn discard(&mut self, s: SlotId) {
        self.values.remove(&s);
    }

    /// Order-independent digest of every output element.
    pub fn checksum(&self) -> Result<f64> {
        Ok(self.outputs()?.iter().map(|t| t.checksum()).sum())
    }
}

#[derive(Debug, Clone)]
pub struct GradBundle<T> {
    /// Indexed by `ParamId`.
    pub params: Vec<ParamGrad<T>>,
    /// Indexed like the graph inputs.
    pub inputs: Vec<Tensor4D<T>>,
    pub trace: Trace,
}

fn timed<R>(on: bool, times: &mut Vec<(NodeId, Duration)>, id: NodeId, f: impl FnOnce() -> R) -> R {
    if !on {
        return f();
    }
    let t0 = Instant::now();
    let r = f();
    times.push((id, t0.elapsed()));
    r
}

pub fn forward<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    inputs: &[Tensor4D<T>],
    cfg: &ExecConfig,
) -> Result<Activations<T>> {
    if inputs.len() != graph.inputs().len() {
        return Err(Error::shape(format!("{} inputs for {} graph inputs", inputs.len(), graph.inputs().len())));
    }
    if params.len() != graph.params().len() {
        return Err(Error::state(format!("{} parameters for {} declared", params.len(), graph.params().len())));
    }
    let mut acts = Activations {
        values: HashMap::new(),
        bn_stats: HashMap::new(),
        outputs: graph.outputs().to_vec(),
        trace: Trace::default(),
    };
    for (&s, t) in graph.inputs().iter().zip(inputs) {
        let want = graph.map_dims(s)?;
        if t.dims() != want {
            return Err(Error::shape(format!("input {s} is {}, graph expects {want}", t.dims())));
        }
        acts.values.insert(s, Value::Map(FeatureMap::dense(t.clone())));
    }
    for node in graph.nodes() {
        let mut log = PassLog::new();
        let mut times = std::mem::take(&mut acts.trace.times);
        let r = timed(cfg.timing, &mut times, node.id, || forward_node(node, params, &mut acts, cfg, &mut log));
        acts.trace.times = times;
        r.map_err(|e| e.at_node(node.id.0))?;
        acts.trace.logs.insert(node.id, log);
    }
    if !cfg.keep_all {
        let mut keep: BTreeSet<SlotId> = graph.outputs().iter().copied().collect();
        keep.extend(graph.inputs().iter().copied());
        for n in graph.nodes() {
            keep.extend(n.saved_for_backward());
        }
        acts.values.retain(|s, _| keep.contains(s));
    }
    Ok(acts)
}

fn forward_node<T: Real>(
    node: &LayerNode,
    params: &ParamStore<T>,
    acts: &mut Activations<T>,
    cfg: &ExecConfig,
    log: &mut PassLog,
) -> Result<()> {
    let ins = &node.inputs;
    let outs = &node.outputs;
    let put = |acts: &mut Activations<T>, s: SlotId, v: Value<T>| {
        acts.values.insert(s, v);
    };
    match &node.kind {
        LayerKind::Conv(c) => {
            let x = acts.map(ins[0])?;
            let p = params.conv(c.param)?;
            let co;
            let pro = match c.prologue {
                Prologue::None => ConvPrologue::None,
                Prologue::Relu => ConvPrologue::Relu,
                Prologue::NormRelu { bn } => {
                    co = BnCoeffs::new(acts.stats(ins[1])?, params.bn(bn)?)?;
                    ConvPrologue::NormRelu(&co)
                }
            };
            let out = conv_fwd_logged(x, p, pro, c.stats_epilogue, &cfg.kernel, log)?;
            put(acts, outs[0], Value::Map(FeatureMap::dense(out.y)));
            if let (Some(i), Some(t)) = (c.postrelu_output(), out.postrelu) {
                put(acts, outs[i], Value::Map(FeatureMap::dense(t)));
            }
            if let (Some(i), Some(st)) = (c.stats_output(), out.stats) {
                put(acts, outs[i], Value::Stats(Arc::new(st)));
            }
        }
        LayerKind::BatchNorm { param } => {
            let x = acts.map(ins[0])?;
            let stats = bn_stats_twopass_logged(x, log);
            let y = bn_fwd_logged(x, &stats, params.bn(*param)?, log)?;
            acts.bn_stats.insert(node.id, Arc::new(stats));
            put(acts, outs[0], Value::Map(FeatureMap::dense(y)));
        }
        LayerKind::Relu => {
            let y = relu_fwd_logged(acts.map(ins[0])?, log);
            put(acts, outs[0], Value::Map(FeatureMap::dense(y)));
        }
        LayerKind::Concat { physical, with_stats, .. } => {
            let maps = node.map_inputs().iter().map(|&s| acts.map(s)).collect::<Result<Vec<_>>>()?;
            if *with_stats {
                let st = ins[maps.len()..].iter().map(|&s| acts.stats(s)).collect::<Result<Vec<_>>>()?;
                let st = (!*physical).then_some(&st[..]);
                let (y, stats) = fused_concat_stats_fwd_logged(&maps, st, *physical, log)?;
                put(acts, outs[0], Value::Map(y));
                put(acts, outs[1], Value::Stats(Arc::new(stats)));
            } else {
                let y = concat_fwd_logged(&maps, *physical, log)?;
                put(acts, outs[0], Value::Map(y));
            }
        }
        LayerKind::Split { .. } => {
            let x = acts.map(ins[0])?.clone();
            for &o in outs {
                put(acts, o, Value::Map(x.clone()));
            }
        }
        LayerKind::EltwiseSum => {
            let y = ews_fwd_logged(acts.map(ins[0])?, acts.map(ins[1])?, log)?;
            put(acts, outs[0], Value::Map(FeatureMap::dense(y)));
        }
        LayerKind::AvgPool { geom, stats_epilogue } => {
            let x = acts.map(ins[0])?;
            if *stats_epilogue {
                let (y, st) = fused_pool_stats_fwd_logged(x, *geom, log)?;
                put(acts, outs[0], Value::Map(FeatureMap::dense(y)));
                put(acts, outs[1], Value::Stats(Arc::new(st)));
            } else {
                let y = avgpool_fwd_logged(x, *geom, log)?;
                put(acts, outs[0], Value::Map(FeatureMap::dense(y)));
            }
        }
        LayerKind::SubBn1 { one_pass, .. } => {
            let x = acts.map(ins[0])?;
            let st = if *one_pass { bn_stats_onepass_logged(x, log) } else { bn_stats_twopass_logged(x, log) };
            put(acts, outs[0], Value::Stats(Arc::new(st)));
        }
        LayerKind::SubBn2 { bn } => {
            let y = bn_fwd_logged(acts.map(ins[0])?, acts.stats(ins[1])?, params.bn(*bn)?, log)?;
            put(acts, outs[0], Value::Map(FeatureMap::dense(y)));
        }
    }
    Ok(())
}

struct GradTable<T> {
    by_slot: HashMap<SlotId, Vec<GradValue<T>>>,
}

impl<T: Real> GradTable<T> {
    fn push(&mut self, s: SlotId, g: GradValue<T>) {
        self.by_slot.entry(s).or_default().push(g);
    }

    fn take_all(&mut self, s: SlotId) -> Vec<GradValue<T>> {
        self.by_slot.remove(&s).unwrap_or_default()
    }

    /// The single gradient of a slot; zero when nothing flowed into it.
    fn take_one(&mut self, graph: &Graph, s: SlotId) -> Result<GradValue<T>> {
        let mut all = self.take_all(s);
        match all.len() {
            0 => Ok(GradValue::Dense(FeatureMap::dense(Tensor4D::zeros_unchecked(graph.map_dims(s)?)))),
            1 => Ok(all.pop().expect("one gradient")),
            k => Err(Error::state(format!("slot {s} received {k} gradients without a Split"))),
        }
    }

    fn take_dense(&mut self, graph: &Graph, s: SlotId) -> Result<FeatureMap<T>> {
        match self.take_one(graph, s)? {
            GradValue::Dense(d) => Ok(d),
            GradValue::Bn(_) => Err(Error::state(format!("unresolved BN gradient reached slot {s}"))),
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

fn add_conv_grad<T: Real>(slot: &mut ParamGrad<T>, dw: &Tensor4D<T>, db: &[T]) -> Result<()> {
    match slot {
        ParamGrad::Conv { dw: a, dbias } => {
            add_into(a.data_mut(), dw.data());
            add_into(dbias, db);
            Ok(())
        }
        ParamGrad::Bn { .. } => Err(Error::state("conv gradient for a BN parameter")),
    }
}

fn add_bn_grad<T: Real>(slot: &mut ParamGrad<T>, dg: &[f64], db: &[f64]) -> Result<()> {
    match slot {
        ParamGrad::Bn { dgamma, dbeta } => {
            for (a, &v) in dgamma.iter_mut().zip(dg) {
                *a = *a + T::cast_from(v);
            }
            for (a, &v) in dbeta.iter_mut().zip(db) {
                *a = *a + T::cast_from(v);
            }
            Ok(())
        }
        ParamGrad::Conv { .. } => Err(Error::state("BN gradient for a conv parameter")),
    }
}

fn saved<T: Real>(acts: &Activations<T>, node: &LayerNode, s: SlotId) -> Result<()> {
    if acts.get(s).is_none() {
        return Err(Error::state(format!("{} backward needs saved activation {s}", node.tag())));
    }
    Ok(())
}

pub fn backward<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    acts: &Activations<T>,
    output_grads: &[Tensor4D<T>],
    cfg: &ExecConfig,
) -> Result<GradBundle<T>> {
    if output_grads.len() != graph.outputs().len() {
        return Err(Error::shape(format!(
            "{} output gradients for {} outputs",
            output_grads.len(),
            graph.outputs().len()
        )));
    }
    let mut table = GradTable { by_slot: HashMap::new() };
    for (&s, g) in graph.outputs().iter().zip(output_grads) {
        let want = graph.map_dims(s)?;
        if g.dims() != want {
            return Err(Error::shape(format!("output gradient {} for output {want}", g.dims())));
        }
        table.push(s, GradValue::Dense(FeatureMap::dense(g.clone())));
    }
    let mut pgrads: Vec<ParamGrad<T>> =
        (0..params.len()).map(|i| ParamGrad::zeros_like(params.get(super::ParamId(i)))).collect();
    let mut trace = Trace::default();
    for &id in graph.topo_order().iter().rev() {
        let node = graph.node(id);
        let mut log = PassLog::new();
        let r = timed(cfg.timing, &mut trace.times, id, || {
            for s in node.saved_for_backward() {
                saved(acts, node, s)?;
            }
            backward_node(graph, node, params, acts, &mut table, &mut pgrads, cfg, &mut log)
        });
        r.map_err(|e| e.at_node(id.0))?;
        trace.logs.insert(id, log);
    }
    let inputs = graph
        .inputs()
        .iter()
        .map(|&s| Ok(table.take_dense(graph, s)?.into_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradBundle { params: pgrads, inputs, trace })
}

#[allow(clippy::too_many_arguments)]
fn backward_node<T: Real>(
    graph: &Graph,
    node: &LayerNode,
    params: &ParamStore<T>,
    acts: &Activations<T>,
    table: &mut GradTable<T>,
    pgrads: &mut [ParamGrad<T>],
    cfg: &ExecConfig,
    log: &mut PassLog,
) -> Result<()> {
    let ins = &node.inputs;
    let outs = &node.outputs;
    match &node.kind {
        LayerKind::Conv(c) => {
            let dy = table.take_one(graph, outs[0])?;
            let y_saved;
            let gin = match &dy {
                GradValue::Dense(d) => ConvGradIn::Dense(d),
                GradValue::Bn(p) if c.resolves_bn_dx => {
                    y_saved = acts.map(outs[0])?;
                    ConvGradIn::Bn { grad: p, y: y_saved }
                }
                GradValue::Bn(_) => return Err(Error::state("conv received a BN gradient it does not resolve")),
            };
            let x = acts.map(ins[0])?;
            let p = params.conv(c.param)?;
            let (co, post) = match c.prologue {
                Prologue::NormRelu { bn } => {
                    let co = BnCoeffs::new(acts.stats(ins[1])?, params.bn(bn)?)?;
                    (Some((bn, co)), Some(acts.map(outs[1])?))
                }
                _ => (None, None),
            };
            let pro = match (&co, c.prologue) {
                (Some((_, co)), _) => ConvPrologue::NormRelu(co),
                (None, Prologue::Relu) => ConvPrologue::Relu,
                _ => ConvPrologue::None,
            };
            let post_planes = post.map(|m| m as &(dyn crate::ops::Planes<T> + Sync));
            let out = conv_bwd_logged(x, post_planes, gin, p, pro, &cfg.kernel, log)?;
            add_conv_grad(&mut pgrads[c.param.0], &out.dw, &out.dbias)?;
            match (co, out.bn) {
                (Some((bn, co)), Some((dg, db))) => {
                    add_bn_grad(&mut pgrads[bn.0], &dg, &db)?;
                    table.push(ins[0], GradValue::Bn(PendingBnGrad::new(FeatureMap::dense(out.dx), co, &dg, &db)));
                }
                _ => table.push(ins[0], GradValue::Dense(FeatureMap::dense(out.dx))),
            }
        }
        LayerKind::BatchNorm { param } => {
            let dy = table.take_dense(graph, outs[0])?;
            let stats = acts
                .bn_stats
                .get(&node.id)
                .ok_or_else(|| Error::state("BN backward without forward statistics"))?;
            let gr = bn_bwd_logged(acts.map(ins[0])?, &dy, stats, params.bn(*param)?, log)?;
            let as64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
            add_bn_grad(&mut pgrads[param.0], &as64(&gr.dgamma), &as64(&gr.dbeta))?;
            table.push(ins[0], GradValue::Dense(FeatureMap::dense(gr.dx)));
        }
        LayerKind::Relu => {
            let dy = table.take_dense(graph, outs[0])?;
            let dx = relu_bwd_logged(acts.map(ins[0])?, &dy, log)?;
            table.push(ins[0], GradValue::Dense(FeatureMap::dense(dx)));
        }
        LayerKind::Concat { physical, forwards_bn_dx, .. } => {
            let maps = node.map_inputs();
            let channels = maps.iter().map(|&s| Ok(graph.map_dims(s)?.c)).collect::<Result<Vec<_>>>()?;
            match table.take_one(graph, outs[0])? {
                GradValue::Dense(dy) => {
                    for (&s, g) in maps.iter().zip(concat_bwd_logged(&dy, &channels, *physical, log)?) {
                        table.push(s, GradValue::Dense(g));
                    }
                }
                GradValue::Bn(p) if *forwards_bn_dx && !*physical => {
                    let mut c0 = 0;
                    for (&s, &c) in maps.iter().zip(&channels) {
                        table.push(s, GradValue::Bn(p.slice(c0, c)?));
                        c0 += c;
                    }
                }
                GradValue::Bn(_) => return Err(Error::state("concat received a BN gradient it cannot forward")),
            }
        }
        LayerKind::Split { bn_dx_outputs, .. } => {
            let mut grads = Vec::with_capacity(outs.len());
            for (i, &o) in outs.iter().enumerate() {
                let g = table.take_one(graph, o)?;
                if matches!(g, GradValue::Bn(_)) && !bn_dx_outputs.contains(&i) {
                    return Err(Error::state(format!("split output {i} received an unexpected BN gradient")));
                }
                grads.push(g);
            }
            let dx = if grads.iter().any(|g| matches!(g, GradValue::Bn(_))) {
                fused_split_bwd_bn_dx_logged(acts.map(ins[0])?, &grads, log)?
            } else {
                let dense: Vec<&FeatureMap<T>> = grads
                    .iter()
                    .map(|g| match g {
                        GradValue::Dense(d) => d,
                        GradValue::Bn(_) => unreachable!(),
                    })
                    .collect();
                split_bwd_logged(&dense, log)?
            };
            table.push(ins[0], GradValue::Dense(FeatureMap::dense(dx)));
        }
        LayerKind::EltwiseSum => {
            let dy = table.take_dense(graph, outs[0])?;
            let (a, b) = ews_bwd(&dy);
            table.push(ins[0], GradValue::Dense(a));
            table.push(ins[1], GradValue::Dense(b));
        }
        LayerKind::AvgPool { geom, .. } => {
            let dy = table.take_dense(graph, outs[0])?;
            let dx = avgpool_bwd_logged(&dy, graph.map_dims(ins[0])?, *geom, log)?;
            table.push(ins[0], GradValue::Dense(FeatureMap::dense(dx)));
        }
        LayerKind::SubBn1 { computes_dx, .. } => {
            if *computes_dx {
                let pending = match table.take_one(graph, ins[0])? {
                    GradValue::Bn(p) => p,
                    GradValue::Dense(_) => return Err(Error::state("statistics node expected a BN gradient")),
                };
                let dx = sub_bn1_bwd_logged(acts.map(ins[0])?, &pending, log)?;
                table.push(ins[0], GradValue::Dense(FeatureMap::dense(dx)));
            }
        }
        LayerKind::SubBn2 { bn } => {
            let dy = table.take_dense(graph, outs[0])?;
            let (pending, dg, db) = sub_bn2_bwd_logged(acts.map(ins[0])?, &dy, acts.stats(ins[1])?, params.bn(*bn)?, log)?;
            add_bn_grad(&mut pgrads[bn.0], &dg, &db)?;
            table.push(ins[0], GradValue::Bn(pending));
        }
    }
    Ok(())
}
