//! Rewrite patterns, their guards, and semantic preservation.

use bnff::fusion::*;
use bnff::graph::*;
use bnff::verify::{within, ACT_REL_TOL, GRAD_REL_TOL};
use bnff::Dims;

fn run(g: &Graph, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let (params, xs, gys) = synthetic::<f32>(g, seed).unwrap();
    let cfg = ExecConfig::default();
    let acts = forward(g, &params, &xs, &cfg).unwrap();
    let out = acts.outputs().unwrap().iter().flat_map(|t| t.data().to_vec()).collect();
    let gb = backward(g, &params, &acts, &gys, &cfg).unwrap();
    let mut grads: Vec<f32> = gb.params.iter().flat_map(|p| p.flat()).collect();
    grads.extend(gb.inputs.iter().flat_map(|t| t.data().to_vec()));
    (out, grads)
}

fn assert_equivalent(original: &Graph, rewritten: &Graph, act_tol: f64) {
    let (y0, g0) = run(original, 17);
    let (y1, g1) = run(rewritten, 17);
    if let Err((i, a, b)) = within(&y0, &y1, act_tol) {
        panic!("activation {i}: {a} vs {b}");
    }
    if let Err((i, a, b)) = within(&g0, &g1, GRAD_REL_TOL) {
        panic!("gradient {i}: {a} vs {b}");
    }
}

fn builder(dims: (usize, usize, usize, usize)) -> (GraphBuilder, SlotId) {
    let mut b = GraphBuilder::new();
    let x = b.input(dims.into()).unwrap();
    (b, x)
}

/// One dense block of `cpls` composite layers, k = 4.
fn one_block(cpls: usize) -> Graph {
    build_model(&ModelSpec::densenet_small(&[cpls], 4, Dims::new(2, 8, 8, 8))).unwrap()
}

/// conv -> bn -> relu -> conv
fn cpl_chain() -> Graph {
    let (mut b, x) = builder((2, 3, 6, 6));
    let y = b.conv(x, 8, 1, 1, 0, "conv1").unwrap();
    let y = b.bn(y, "bn").unwrap();
    let y = b.relu(y, "relu").unwrap();
    let y = b.conv(y, 4, 3, 1, 1, "conv2").unwrap();
    b.finish(&[y]).unwrap()
}

#[test]
fn fission_splits_one_bn_in_two() {
    let g = cpl_chain();
    let f = apply_fission(&g).unwrap();
    assert_eq!(f.count_tag(KindTag::BatchNorm), 0);
    assert_eq!(f.count_tag(KindTag::FissionSubBN1), 1);
    assert_eq!(f.count_tag(KindTag::FissionSubBN2), 1);
    assert_equivalent(&g, &f, 1e-5);
}

#[test]
fn fission_leaves_bn_free_graphs_alone() {
    let (mut b, x) = builder((1, 2, 4, 4));
    let y = b.conv(x, 3, 3, 1, 1, "conv").unwrap();
    let y = b.relu(y, "relu").unwrap();
    let g = b.finish(&[y]).unwrap();
    assert!(apply_fission(&g).unwrap().is_isomorphic(&g));
    assert!(apply_mvf(&g).unwrap().is_isomorphic(&g));
}

#[test]
fn fission_of_three_layer_block() {
    let g = one_block(3);
    let bns = g.count_tag(KindTag::BatchNorm);
    assert_eq!(bns, 6);
    let f = apply_fission(&g).unwrap();
    assert_eq!(f.count_tag(KindTag::FissionSubBN1) + f.count_tag(KindTag::FissionSubBN2), 2 * bns);
    assert_equivalent(&g, &f, 1e-5);
}

#[test]
fn rcf_fuses_relu_into_sole_conv_consumer() {
    let (mut b, x) = builder((2, 3, 5, 5));
    let y = b.relu(x, "relu").unwrap();
    let y = b.conv(y, 4, 3, 1, 1, "conv").unwrap();
    let g = b.finish(&[y]).unwrap();
    let f = apply_rcf(&g).unwrap();
    assert_eq!(f.node_count(), 1);
    assert_eq!(f.count_tag(KindTag::FusedReluConv), 1);
    assert_equivalent(&g, &f, 1e-6);
}

#[test]
fn rcf_skips_relu_with_other_consumers() {
    let (mut b, x) = builder((2, 3, 5, 5));
    let y = b.relu(x, "relu").unwrap();
    let parts = b.split(y, 2, "split").unwrap();
    let c = b.conv(parts[0], 3, 3, 1, 1, "conv").unwrap();
    let y = b.ews(c, parts[1], "sum").unwrap();
    let g = b.finish(&[y]).unwrap();
    let f = apply_rcf(&g).unwrap();
    assert_eq!(f.count_tag(KindTag::ReLU), 1);
    assert_eq!(f.count_tag(KindTag::FusedReluConv), 0);
}

#[test]
fn rcf_ignores_conv_then_relu() {
    let (mut b, x) = builder((2, 3, 5, 5));
    let y = b.conv(x, 4, 3, 1, 1, "conv").unwrap();
    let y = b.relu(y, "relu").unwrap();
    let g = b.finish(&[y]).unwrap();
    assert!(apply_rcf(&g).unwrap().is_isomorphic(&g));
}

#[test]
fn bnff_folds_chain_into_two_kernels() {
    let g = cpl_chain();
    let f = apply_bnff(&g).unwrap();
    assert_eq!(f.node_count(), 2);
    assert_eq!(f.count_tag(KindTag::FusedConvStats), 1);
    assert_eq!(f.count_tag(KindTag::FusedNormReluConv), 1);
    assert_eq!(standalone_bn_nodes(&f), 0);
    assert_equivalent(&g, &f, ACT_REL_TOL);
}

#[test]
fn bnff_on_two_layer_block_leaves_boundary_bns() {
    let g = one_block(2);
    let (f, p) = plan(&g, FusionLevel::Bnff).unwrap();
    assert_eq!(p.fully_fused_bn_ids.len(), 2);
    assert_eq!(p.unfused_bn_ids.len(), 2);
    let boundary = |ids: &[NodeId]| {
        ids.iter().filter(|&&id| matches!(g.producer(g.node(id).inputs[0]).map(|n| n.tag()), Some(KindTag::Concat | KindTag::Split))).count()
    };
    assert_eq!(boundary(&p.unfused_bn_ids), 2);
    assert_eq!(boundary(&p.fully_fused_bn_ids), 0);
    assert_eq!(f.count_tag(KindTag::FissionSubBN2), 0);
    assert_eq!(f.count_tag(KindTag::FissionSubBN1), 2);
    assert_equivalent(&g, &f, ACT_REL_TOL);

    // The default micro net has the same pattern in every composite layer.
    let g = build_model(&ModelSpec::densenet_micro(2)).unwrap();
    let (_, p) = plan(&g, FusionLevel::Bnff).unwrap();
    let internal = |ids: &[NodeId]| ids.iter().filter(|&&id| g.node(id).label.ends_with("bn2")).count();
    assert_eq!(internal(&p.fully_fused_bn_ids), 6);
    assert_eq!(internal(&p.unfused_bn_ids), 0);
}

#[test]
fn icf_completes_micro_densenet() {
    let g = build_model(&ModelSpec::densenet_micro(2)).unwrap();
    let (f, p) = plan(&g, FusionLevel::BnffIcf).unwrap();
    assert!(p.unfused_bn_ids.is_empty());
    assert_eq!(standalone_bn_nodes(&f), 0);
    assert_eq!(p.fully_fused_bn_ids.len(), g.count_tag(KindTag::BatchNorm));
    assert_equivalent(&g, &f, ACT_REL_TOL);
    assert!(explain(&p, &g, &f).contains("unfused BNs: none"));
}

#[test]
fn icf_on_resnet_moves_only_backward_at_unit_entries() {
    let g = build_model(&ModelSpec::resnet_micro(2)).unwrap();
    let (bnff, _) = plan(&g, FusionLevel::Bnff).unwrap();
    let (icf, p) = plan(&g, FusionLevel::BnffIcf).unwrap();
    assert_eq!(icf.count_tag(KindTag::FusedConcatStats), 0);
    let backward_moves = p.rewrites.iter().filter(|r| r.kind == RewriteKind::IcfBackward).count();
    let splits = g.count_tag(KindTag::Split);
    assert!(backward_moves >= splits - 1 && backward_moves > 0, "{backward_moves} of {splits}");
    assert!(standalone_bn_nodes(&icf) <= standalone_bn_nodes(&bnff));
    assert_equivalent(&g, &icf, ACT_REL_TOL);
}

#[test]
fn baseline_plan_is_identity() {
    let g = build_model(&ModelSpec::densenet_micro(2)).unwrap();
    let (f, p) = plan(&g, FusionLevel::Baseline).unwrap();
    assert!(f.is_isomorphic(&g));
    assert!(p.rewrites.is_empty());
    assert!(p.node_map.iter().all(|(k, v)| v == &vec![*k]));
}

#[test]
fn levels_preserve_interface_and_shrink_sweeps() {
    for spec in [ModelSpec::densenet_micro(2), ModelSpec::resnet_micro(2)] {
        let g = build_model(&spec).unwrap();
        let mut counts = vec![];
        for level in FusionLevel::ALL {
            let (f, p) = plan(&g, level).unwrap();
            assert_eq!(f.inputs(), g.inputs());
            assert_eq!(f.outputs(), g.outputs());
            // Every original node is carried or replaced.
            assert!(p.node_map.keys().eq(g.nodes().map(|n| &n.id)));
            f.validate().unwrap();
            counts.push(sweeping_node_count(&f));
        }
        // Fission turns one node into two, so RCF+MVF is compared against
        // the RCF graph with its BNs split.
        let (rcf, _) = plan(&g, FusionLevel::Rcf).unwrap();
        let normalized = sweeping_node_count(&apply_fission(&rcf).unwrap());
        assert!(counts[1] <= counts[0], "{counts:?}");
        assert!(counts[2] <= normalized, "{counts:?} vs {normalized}");
        assert!(counts[2..].windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    }
}

#[test]
fn explain_lists_every_rewrite() {
    let g = cpl_chain();
    let (f, p) = plan(&g, FusionLevel::Bnff).unwrap();
    let text = explain(&p, &g, &f);
    assert!(text.starts_with("level bnff:"));
    assert_eq!(text.lines().count(), p.rewrites.len() + 3);
    for kind in ["relu-conv", "fission", "mean-var", "conv+stats", "norm+relu+conv"] {
        assert!(text.contains(kind), "{kind} missing from\n{text}");
    }
    assert!(text.contains("'conv1'") && text.contains("'bn'"));
}

#[test]
fn levels_parse_from_names() {
    for level in FusionLevel::ALL {
        assert_eq!(level.name().parse::<FusionLevel>().unwrap(), level);
    }
    assert_eq!("BNFF_ICF".parse::<FusionLevel>().unwrap(), FusionLevel::BnffIcf);
    assert!("turbo".parse::<FusionLevel>().is_err());
}
