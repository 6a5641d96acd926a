use crate::graph::{LayerKind, LayerNode, Pass, Prologue};
use crate::sweep::{Access, Operand};

use Access::{Read as R, Write as W};
use Operand::*;

/// The sweeps a node is charged in one pass.
///
/// This table is written from the layer semantics, not from the kernels; the
/// instrumented ledger is checked against it.
pub fn node_rule(node: &LayerNode, pass: Pass) -> Vec<(Operand, Access)> {
    let maps = node.map_inputs().len();
    match pass {
        Pass::Forward => match &node.kind {
            LayerKind::Conv(c) => {
                let mut v = vec![(Input(0), R), (Weight, R), (Output(0), W)];
                if let Some(i) = c.postrelu_output() {
                    v.push((Output(i), W));
                }
                v
            }
            // mean, variance, normalize
            LayerKind::BatchNorm { .. } => vec![(Input(0), R), (Input(0), R), (Input(0), R), (Output(0), W)],
            LayerKind::Relu | LayerKind::AvgPool { .. } | LayerKind::SubBn2 { .. } => {
                vec![(Input(0), R), (Output(0), W)]
            }
            LayerKind::Concat { physical: true, .. } => {
                let mut v: Vec<_> = (0..maps).map(|i| (Input(i), R)).collect();
                v.push((Output(0), W));
                v
            }
            LayerKind::Concat { physical: false, .. } | LayerKind::Split { .. } => vec![],
            LayerKind::EltwiseSum => vec![(Input(0), R), (Input(1), R), (Output(0), W)],
            LayerKind::SubBn1 { one_pass: true, .. } => vec![(Input(0), R)],
            LayerKind::SubBn1 { one_pass: false, .. } => vec![(Input(0), R), (Input(0), R)],
        },
        Pass::Backward => match &node.kind {
            LayerKind::Conv(c) => {
                // The BN input gradient is finished while dY is streamed, which
                // needs the conv's own output as well.
                let mut dy = vec![(OutputGrad(0), R)];
                if c.resolves_bn_dx {
                    dy.push((Output(0), R));
                }
                let mut v = dy.clone();
                v.push((Weight, R));
                if c.prologue != Prologue::None {
                    v.push((Input(0), R));
                }
                v.push((InputGrad(0), W));
                v.extend(dy);
                v.push((c.postrelu_output().map_or(Input(0), Output), R));
                v.push((WeightGrad, W));
                v
            }
            LayerKind::BatchNorm { .. } => vec![
                (OutputGrad(0), R),
                (Input(0), R),
                (OutputGrad(0), R),
                (Input(0), R),
                (InputGrad(0), W),
            ],
            LayerKind::Relu => vec![(Input(0), R), (OutputGrad(0), R), (InputGrad(0), W)],
            LayerKind::Concat { physical: true, .. } => {
                let mut v = vec![(OutputGrad(0), R)];
                v.extend((0..maps).map(|i| (InputGrad(i), W)));
                v
            }
            LayerKind::Concat { physical: false, .. } | LayerKind::EltwiseSum => vec![],
            LayerKind::Split { fanout, bn_dx_outputs } => {
                let mut v = vec![];
                for i in 0..*fanout {
                    v.push((OutputGrad(i), R));
                    if bn_dx_outputs.contains(&i) {
                        v.push((Input(0), R));
                    }
                }
                v.push((InputGrad(0), W));
                v
            }
            LayerKind::AvgPool { .. } => vec![(OutputGrad(0), R), (InputGrad(0), W)],
            LayerKind::SubBn1 { computes_dx: true, .. } => vec![(InputGrad(0), R), (Input(0), R), (InputGrad(0), W)],
            LayerKind::SubBn1 { computes_dx: false, .. } => vec![],
            LayerKind::SubBn2 { .. } => vec![(OutputGrad(0), R), (Input(0), R)],
        },
    }
}
