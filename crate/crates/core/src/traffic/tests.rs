use super::*;
use crate::fusion::plan;
use crate::graph::GraphBuilder;
use crate::tensor::Dims;

fn micro_graphs() -> Vec<Graph> {
    vec![build_model(&ModelSpec::densenet_micro(2)).unwrap(), build_model(&ModelSpec::resnet_micro(2)).unwrap()]
}

#[test]
fn measured_matches_analytic_at_every_level() {
    for g in micro_graphs() {
        for level in FusionLevel::ALL {
            let (fg, _) = plan(&g, level).unwrap();
            let a = analytic_ledger(&fg).unwrap();
            let m = instrument_execution(&fg, 3).unwrap();
            compare_ledgers(&a, &m).unwrap_or_else(|e| panic!("{level}: {e}"));
        }
    }
}

#[test]
fn mismatch_names_node() {
    let g = &micro_graphs()[0];
    let a = analytic_ledger(g).unwrap();
    let mut m = a.clone();
    m.nodes[4].entries[0].count += 1;
    let err = compare_ledgers(&a, &m).unwrap_err().to_string();
    assert!(err.contains(&a.nodes[4].node.to_string()), "{err}");
}

#[test]
fn single_bn_forward_sweeps() {
    let mut b = GraphBuilder::new();
    let x = b.input(Dims::new(2, 3, 4, 4)).unwrap();
    let y = b.bn(x, "bn").unwrap();
    let g = b.finish(&[y]).unwrap();
    let m = instrument_execution(&g, 1).unwrap();
    let n = m.pass(Pass::Forward).next().unwrap();
    assert_eq!((n.reads(), n.writes()), (3, 1));
    assert_eq!(n.fmap_bytes(), 4 * 2 * 3 * 16 * 4);
}

#[test]
fn neighborhood_deltas() {
    let g = &micro_graphs()[0];
    let nbs = bn_neighborhoods(g);
    assert_eq!(nbs.len(), 6);
    let base = analytic_ledger(g).unwrap();
    for level in [FusionLevel::Bnff, FusionLevel::BnffIcf] {
        let (fg, _) = plan(g, level).unwrap();
        let fused = analytic_ledger(&fg).unwrap();
        for nb in &nbs {
            let fs = fused_neighborhood_slots(&fg, nb);
            assert_eq!(base.sweeps_on(&nb.slots, Pass::Forward), 8);
            assert_eq!(fused.sweeps_on(&fs, Pass::Forward), 3);
            let (b, f) = (base.sweeps_on(&nb.slots, Pass::Backward), fused.sweeps_on(&fs, Pass::Backward));
            assert_eq!(b - f, 5, "{level} {}: {b} -> {f}", nb.bn);
        }
    }
}

#[test]
fn no_bn_or_relu_is_level_invariant() {
    let mut b = GraphBuilder::new();
    let x = b.input(Dims::new(2, 3, 6, 6)).unwrap();
    let y = b.conv(x, 4, 3, 1, 1, "c1").unwrap();
    let z = b.conv(y, 4, 1, 1, 0, "c2").unwrap();
    let g = b.finish(&[z]).unwrap();
    let totals: Vec<_> = FusionLevel::ALL
        .iter()
        .map(|&l| count_sweeps(&plan(&g, l).unwrap().0, l).unwrap().total())
        .collect();
    assert!(totals.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn monotone_and_groups_sum() {
    for g in micro_graphs() {
        let mut prev: Option<TrafficReport> = None;
        for level in FusionLevel::ALL {
            let r = count_sweeps(&plan(&g, level).unwrap().0, level).unwrap();
            assert_eq!(r.conv.bytes() + r.non_conv.bytes(), r.total().bytes());
            if let Some(p) = &prev {
                assert!(r.forward.bytes() <= p.forward.bytes(), "{level} forward");
                assert!(r.backward.bytes() <= p.backward.bytes(), "{level} backward");
            }
            prev = Some(r);
        }
    }
}

#[test]
fn csv_round_trip() {
    let reports = report_model(&ModelSpec::densenet_micro(2), &FusionLevel::ALL, PlanOptions::default()).unwrap();
    let mut buf = vec![];
    write_csv(&reports, &mut buf).unwrap();
    let rows = read_csv(&buf[..]).unwrap();
    let want: usize = reports.iter().map(|r| r.ledger.nodes.len()).sum();
    assert_eq!(rows.len(), want);
    let bytes: u64 = rows.iter().filter(|r| r.level == "bnff").map(|r| r.bytes + r.weight_bytes).sum();
    assert_eq!(bytes, reports[3].total().bytes());
    let mut js = vec![];
    write_json(&reports, &mut js).unwrap();
    let v: Vec<TrafficSummary> = serde_json::from_slice(&js).unwrap();
    assert_eq!(v[0].reduction_pct, Some(0.0));
    assert!(v[4].reduction_pct.unwrap() > v[3].reduction_pct.unwrap());
}

#[test]
fn densenet121_report() {
    let base = report_densenet121(120, FusionLevel::Baseline).unwrap();
    let bnff = report_densenet121(120, FusionLevel::Bnff).unwrap();
    let icf = report_densenet121(120, FusionLevel::BnffIcf).unwrap();
    println!(
        "relu share {:.2}%  bnff {:.2}%  icf {:.2}%  weights {:.2}%",
        base.relu_share_pct(),
        bnff.reduction_pct.unwrap(),
        icf.reduction_pct.unwrap(),
        100.0 * base.total().weight_bytes as f64 / base.total().bytes() as f64
    );
    assert!(icf.reduction_pct > bnff.reduction_pct);
}
