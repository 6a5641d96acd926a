//! The analytic sweep model on toy graphs and the full-shape networks.

use bnff::fusion::{plan, FusionLevel, PlanOptions};
use bnff::graph::*;
use bnff::traffic::*;

fn toy() -> Graph {
    let mut b = GraphBuilder::new();
    let x = b.input((2, 4, 6, 6).into()).unwrap();
    let y = b.conv(x, 8, 1, 1, 0, "conv1").unwrap();
    let y = b.bn(y, "bn").unwrap();
    let y = b.relu(y, "relu").unwrap();
    let y = b.conv(y, 4, 3, 1, 1, "conv2").unwrap();
    b.finish(&[y]).unwrap()
}

fn fmap_sweeps(n: &NodeLedger) -> u32 {
    n.entries.iter().filter(|e| e.tensor.is_feature_map()).map(|e| e.count).sum()
}

#[test]
fn single_bn_toy_forward_sweeps() {
    let g = toy();
    let base = count_sweeps(&g, FusionLevel::Baseline).unwrap();
    let per_kind = |r: &TrafficReport, kind: KindTag| -> Vec<u32> {
        r.ledger.pass(Pass::Forward).filter(|n| n.kind == kind).map(fmap_sweeps).collect()
    };
    assert_eq!(per_kind(&base, KindTag::BatchNorm), vec![4]);
    assert_eq!(per_kind(&base, KindTag::ReLU), vec![2]);
    assert_eq!(base.forward.sweeps, 10);

    let (fg, _) = plan(&g, FusionLevel::Bnff).unwrap();
    let fused = count_sweeps(&fg, FusionLevel::Bnff).unwrap();
    // The BN's four sweeps collapse into the statistics gathered on the conv's one write.
    assert_eq!(per_kind(&fused, KindTag::FusedConvStats), vec![2]);
    assert_eq!(per_kind(&fused, KindTag::FusedNormReluConv), vec![3]);
    assert_eq!(fused.forward.sweeps, 5);
    assert_eq!(base.backward.sweeps - fused.backward.sweeps, 5);
}

#[test]
fn analytic_matches_measured_on_toy() {
    let g = toy();
    for level in FusionLevel::ALL {
        let (fg, _) = plan(&g, level).unwrap();
        compare_ledgers(&analytic_ledger(&fg).unwrap(), &instrument_execution(&fg, 4).unwrap()).unwrap();
    }
}

#[test]
fn graph_without_bn_or_relu_is_level_invariant() {
    let mut b = GraphBuilder::new();
    let x = b.input((1, 3, 8, 8).into()).unwrap();
    let y = b.conv(x, 6, 3, 1, 1, "conv").unwrap();
    let y = b.avgpool(y, 2, 2, "pool").unwrap();
    let g = b.finish(&[y]).unwrap();
    let base = count_sweeps(&g, FusionLevel::Baseline).unwrap().total();
    for level in FusionLevel::ALL {
        let (fg, _) = plan(&g, level).unwrap();
        assert_eq!(count_sweeps(&fg, level).unwrap().total(), base, "{level}");
    }
}

#[test]
fn report_totals_are_consistent() {
    let reports = report_model(&ModelSpec::densenet_micro(4), &FusionLevel::ALL, PlanOptions::default()).unwrap();
    let base = &reports[0];
    for r in &reports {
        let t = r.total();
        assert_eq!(r.conv.bytes() + r.non_conv.bytes(), t.bytes());
        assert_eq!(r.forward.bytes() + r.backward.bytes(), t.bytes());
        let by_node: u64 = r.ledger.nodes.iter().map(|n| n.fmap_bytes() + n.weight_bytes()).sum();
        assert_eq!(by_node, t.bytes());
        let want = 100.0 * (1.0 - t.bytes() as f64 / base.total().bytes() as f64);
        assert!((r.reduction_pct.unwrap() - want).abs() < 1e-9);
    }
    assert_eq!(base.reduction_pct, Some(0.0));
}

#[test]
fn resnet50_bnff_reduces_traffic() {
    let levels = [FusionLevel::Baseline, FusionLevel::Bnff, FusionLevel::BnffIcf];
    let r = report_model(&ModelSpec::resnet50(120), &levels, PlanOptions::default()).unwrap();
    let (bnff, icf) = (r[1].reduction_pct.unwrap(), r[2].reduction_pct.unwrap());
    assert!(bnff > 0.0, "{bnff}");
    assert!(icf >= bnff, "{icf} < {bnff}");
}

#[test]
fn densenet121_levels_order() {
    let base = report_densenet121(120, FusionLevel::Baseline).unwrap();
    let bnff = report_densenet121(120, FusionLevel::Bnff).unwrap();
    let icf = report_densenet121(120, FusionLevel::BnffIcf).unwrap();
    assert!(base.relu_share_pct() > 0.0);
    assert!(bnff.reduction_pct.unwrap() > 0.0);
    assert!(icf.reduction_pct.unwrap() > bnff.reduction_pct.unwrap());
    assert_eq!(base.reduction_pct, Some(0.0));
}

#[test]
fn csv_rows_parse_back() {
    let reports = report_model(&ModelSpec::resnet_micro(2), &[FusionLevel::Baseline, FusionLevel::Bnff], PlanOptions::default()).unwrap();
    let mut buf = vec![];
    write_csv(&reports, &mut buf).unwrap();
    let rows = read_csv(&buf[..]).unwrap();
    let nodes: usize = reports.iter().map(|r| r.ledger.nodes.len()).sum();
    assert_eq!(rows.len(), nodes);
    let bytes: u64 = rows.iter().filter(|r| r.level == "bnff").map(|r| r.bytes + r.weight_bytes).sum();
    assert_eq!(bytes, reports[1].total().bytes());
}
