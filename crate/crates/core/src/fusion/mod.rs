//! BN fission and fusion rewrites.
//!
//! Every rewrite is pure: it takes a graph and returns a new one. Nodes that
//! a rewrite touches are replaced by nodes with fresh ids; tensors that
//! survive keep their slot ids, so activations of a rewritten graph can be
//! compared slot by slot with the original.

mod explain;
mod rewrite;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, KindTag, LayerKind, NodeId};

pub use explain::explain;
use rewrite::Rewriter;

/// Cumulative optimization levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionLevel {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "rcf")]
    Rcf,
    #[serde(rename = "rcf+mvf")]
    RcfMvf,
    #[serde(rename = "bnff")]
    Bnff,
    #[serde(rename = "bnff+icf")]
    BnffIcf,
}

impl FusionLevel {
    pub const ALL: [FusionLevel; 5] =
        [FusionLevel::Baseline, FusionLevel::Rcf, FusionLevel::RcfMvf, FusionLevel::Bnff, FusionLevel::BnffIcf];

    pub fn name(self) -> &'static str {
        match self {
            FusionLevel::Baseline => "baseline",
            FusionLevel::Rcf => "rcf",
            FusionLevel::RcfMvf => "rcf+mvf",
            FusionLevel::Bnff => "bnff",
            FusionLevel::BnffIcf => "bnff+icf",
        }
    }
}

impl fmt::Display for FusionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "+");
        FusionLevel::ALL
            .into_iter()
            .find(|l| l.name() == norm)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown fusion level '{s}'")))
    }
}

/// How Concat nodes are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConcatMode {
    /// Physical copies at Baseline, zero-copy views at every other level.
    #[default]
    Auto,
    /// Views at every level, Baseline included.
    Views,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlanOptions {
    pub concat: ConcatMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RewriteKind {
    ConcatView,
    Rcf,
    Fission,
    Mvf,
    ConvStats,
    NormReluConv,
    /// Statistics produced by an upstream kernel's write (ICF forward).
    IcfStats,
    /// BN input gradient routed to the producer's backward (ICF backward).
    IcfBackward,
}

impl RewriteKind {
    pub fn name(self) -> &'static str {
        match self {
            RewriteKind::ConcatView => "concat-view",
            RewriteKind::Rcf => "relu-conv",
            RewriteKind::Fission => "fission",
            RewriteKind::Mvf => "mean-var",
            RewriteKind::ConvStats => "conv+stats",
            RewriteKind::NormReluConv => "norm+relu+conv",
            RewriteKind::IcfStats => "icf-stats",
            RewriteKind::IcfBackward => "icf-backward",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rewrite {
    pub kind: RewriteKind,
    /// Nodes consumed, as they existed when the rewrite fired.
    pub matched: Vec<NodeId>,
    /// `Kind 'label'` of each matched node, captured before removal.
    pub matched_desc: Vec<String>,
    pub replacement: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub level: FusionLevel,
    pub rewrites: Vec<Rewrite>,
    /// BatchNorm nodes of the input graph with both halves folded into
    /// neighbouring kernels.
    pub fully_fused_bn_ids: Vec<NodeId>,
    /// BatchNorm nodes of the input graph for which some standalone BN or
    /// sub-BN node remains.
    pub unfused_bn_ids: Vec<NodeId>,
    /// Input-graph node → nodes of the rewritten graph derived from it.
    pub node_map: BTreeMap<NodeId, Vec<NodeId>>,
}

pub fn apply_fission(graph: &Graph) -> Result<Graph> {
    let mut r = Rewriter::new(graph);
    r.fission();
    r.finish()
}

/// One-pass statistics; fissions any remaining BN first.
pub fn apply_mvf(graph: &Graph) -> Result<Graph> {
    let mut r = Rewriter::new(graph);
    r.fission();
    r.mvf();
    r.finish()
}

pub fn apply_rcf(graph: &Graph) -> Result<Graph> {
    let mut r = Rewriter::new(graph);
    r.rcf();
    r.finish()
}

/// Fission, MVF and RCF, then folds sub-BN1 into producing convolutions and
/// sub-BN2+ReLU into consuming convolutions.
pub fn apply_bnff(graph: &Graph) -> Result<Graph> {
    let mut r = Rewriter::new(graph);
    r.bnff();
    r.finish()
}

/// BNFF plus folding of CPL-boundary statistics into Concat/producer writes
/// and of their input gradients into Split backward.
pub fn apply_icf(graph: &Graph) -> Result<Graph> {
    let mut r = Rewriter::new(graph);
    r.bnff();
    r.icf();
    r.finish()
}

pub fn plan(graph: &Graph, level: FusionLevel) -> Result<(Graph, FusionPlan)> {
    plan_with(graph, level, PlanOptions::default())
}

pub fn plan_with(graph: &Graph, level: FusionLevel, opts: PlanOptions) -> Result<(Graph, FusionPlan)> {
    let mut r = Rewriter::new(graph);
    if level > FusionLevel::Baseline || opts.concat == ConcatMode::Views {
        r.concat_views();
    }
    if level >= FusionLevel::Rcf {
        r.rcf();
    }
    if level >= FusionLevel::RcfMvf {
        r.fission();
        r.mvf();
    }
    if level >= FusionLevel::Bnff {
        r.bnff();
    }
    if level >= FusionLevel::BnffIcf {
        r.icf();
    }
    let rewrites = r.log().to_vec();
    let (out, anc) = r.finish_with_ancestry()?;

    let mut node_map: BTreeMap<NodeId, Vec<NodeId>> = graph.nodes().map(|n| (n.id, vec![])).collect();
    let mut remaining_bn: BTreeSet<NodeId> = BTreeSet::new();
    for n in out.nodes() {
        let from = &anc[&n.id];
        for o in from {
            node_map.entry(*o).or_default().push(n.id);
        }
        if matches!(n.kind, LayerKind::BatchNorm { .. } | LayerKind::SubBn1 { .. } | LayerKind::SubBn2 { .. }) {
            remaining_bn.extend(from.iter().copied());
        }
    }
    let mut fully = vec![];
    let mut unfused = vec![];
    for n in graph.nodes().filter(|n| n.tag() == KindTag::BatchNorm) {
        if remaining_bn.contains(&n.id) {
            unfused.push(n.id);
        } else {
            fully.push(n.id);
        }
    }
    Ok((out, FusionPlan { level, rewrites, fully_fused_bn_ids: fully, unfused_bn_ids: unfused, node_map }))
}

/// Nodes that stream feature maps through memory on their own (every node
/// except pointer-passing Split and view Concat).
pub fn sweeping_node_count(g: &Graph) -> usize {
    g.nodes()
        .filter(|n| !matches!(n.kind, LayerKind::Split { .. } | LayerKind::Concat { physical: false, .. }))
        .count()
}

/// Standalone BN-derived nodes left in a graph.
pub fn standalone_bn_nodes(g: &Graph) -> usize {
    g.nodes()
        .filter(|n| matches!(n.kind, LayerKind::BatchNorm { .. } | LayerKind::SubBn1 { .. } | LayerKind::SubBn2 { .. }))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{backward, build_model, forward, ExecConfig, ModelSpec, ParamStore};
    use crate::rng::Rng;
    use crate::tensor::Tensor4D;

    fn run(g: &Graph, params: &ParamStore<f64>, x: &Tensor4D<f64>, gy: &Tensor4D<f64>) -> (Vec<f64>, Vec<f64>) {
        let cfg = ExecConfig::default();
        let acts = forward(g, params, std::slice::from_ref(x), &cfg).unwrap();
        let out = acts.outputs().unwrap()[0].data().to_vec();
        let grads = backward(g, params, &acts, std::slice::from_ref(gy), &cfg).unwrap();
        let mut flat: Vec<f64> = grads.params.iter().flat_map(|p| p.flat()).collect();
        flat.extend(grads.inputs[0].data());
        (out, flat)
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (scale + 1.0))
    }

    fn check_levels(spec: ModelSpec) {
        let g = build_model(&spec).unwrap();
        let mut rng = Rng::new(7);
        let params = ParamStore::<f64>::init(&g, &mut rng).unwrap();
        let x = rng.uniform(spec.input, -1.0, 1.0).unwrap();
        let out_dims = g.map_dims(g.outputs()[0]).unwrap();
        let gy = rng.uniform(out_dims, -1.0, 1.0).unwrap();
        let (y0, g0) = run(&g, &params, &x, &gy);
        for level in FusionLevel::ALL {
            let (fg, _) = plan(&g, level).unwrap();
            let (y, gr) = run(&fg, &params, &x, &gy);
            assert!(close(&y0, &y), "{level} forward");
            assert!(close(&g0, &gr), "{level} backward");
        }
    }

    #[test]
    fn levels_agree_densenet() {
        check_levels(ModelSpec::densenet_micro(2));
    }

    #[test]
    fn levels_agree_resnet() {
        check_levels(ModelSpec::resnet_micro(2));
    }

    #[test]
    fn bnff_icf_removes_interior_bns() {
        let g = build_model(&ModelSpec::densenet_micro(2)).unwrap();
        let (fg, p) = plan(&g, FusionLevel::BnffIcf).unwrap();
        assert!(p.unfused_bn_ids.len() < g.count_tag(KindTag::BatchNorm));
        println!("{}", explain(&p, &g, &fg));
        let (bg, bp) = plan(&g, FusionLevel::Baseline).unwrap();
        assert!(bg.is_isomorphic(&g));
        assert!(bp.rewrites.is_empty());
        assert!(explain(&bp, &g, &bg).contains("0 rewrites"));
    }

    #[test]
    fn replanning_is_idempotent() {
        let g = build_model(&ModelSpec::densenet_micro(2)).unwrap();
        for level in FusionLevel::ALL {
            let (once, _) = plan(&g, level).unwrap();
            let (twice, p2) = plan(&once, level).unwrap();
            assert_eq!(once.signature(), twice.signature(), "{level}");
            assert!(p2.rewrites.is_empty(), "{level}: {:?}", p2.rewrites);
        }
    }
}
