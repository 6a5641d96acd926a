use std::fmt::Write;

use super::FusionPlan;
use crate::graph::{Graph, NodeId};

fn describe(g: &Graph, id: NodeId) -> String {
    match g.try_node(id) {
        Some(n) => format!("{id} {} '{}'", n.tag().name(), n.label),
        None => id.to_string(),
    }
}

/// Human-readable account of a plan: every rewrite with the nodes it
/// consumed and produced, then the BN fusion outcome.
pub fn explain(plan: &FusionPlan, original: &Graph, fused: &Graph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "level {}: {} rewrites", plan.level, plan.rewrites.len());
    for (i, r) in plan.rewrites.iter().enumerate() {
        let matched: Vec<_> = r.matched.iter().zip(&r.matched_desc).map(|(id, d)| format!("{id} {d}")).collect();
        let repl: Vec<_> = r.replacement.iter().map(|&id| describe(fused, id)).collect();
        let _ = writeln!(s, "{:>4} {:<14} [{}] -> [{}]", i + 1, r.kind.name(), matched.join(", "), repl.join(", "));
    }
    let _ = writeln!(s, "fully fused BNs: {}", plan.fully_fused_bn_ids.len());
    if plan.unfused_bn_ids.is_empty() {
        let _ = writeln!(s, "unfused BNs: none");
    } else {
        let names: Vec<_> = plan.unfused_bn_ids.iter().map(|&id| describe(original, id)).collect();
        let _ = writeln!(s, "unfused BNs: {}", names.join(", "));
    }
    s
}
