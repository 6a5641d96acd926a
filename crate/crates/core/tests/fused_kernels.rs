//! Fused kernels against sequential compositions of the reference ops.

use bnff::fusion::{plan, FusionLevel};
use bnff::graph::{build_model, KindTag, ModelSpec, Pass};
use bnff::kernels::*;
use bnff::ops::*;
use bnff::sweep::Access;
use bnff::traffic::instrument_execution;
use bnff::verify::within;
use bnff::{FeatureMap, Real, Rng, Tensor4D};
use proptest::prelude::*;

fn close<T: Real>(what: &str, reference: &[T], other: &[T], rel: f64) {
    if let Err((i, a, b)) = within(reference, other, rel) {
        panic!("{what}[{i}]: reference {a}, fused {b}");
    }
}

fn stats_close(reference: &ChannelStats, other: &ChannelStats, rel: f64) {
    assert_eq!(reference.count, other.count);
    close("mean", &reference.mean, &other.mean, rel);
    let (rv, ov): (Vec<f64>, Vec<f64>) =
        (0..reference.channels()).map(|c| (reference.var_clamped(c), other.var_clamped(c))).unzip();
    close("var", &rv, &ov, rel);
}

fn identity_1x1(c: usize) -> ConvParams<f64> {
    let mut w = Tensor4D::zeros((c, c, 1, 1)).unwrap();
    for i in 0..c {
        w.set(i, i, 0, 0, 1.0);
    }
    ConvParams::with_weights(ConvGeometry::new(c, c, 1, 1, 0), w).unwrap()
}

fn random_conv(rng: &mut Rng, in_c: usize, out_c: usize, k: usize) -> ConvParams<f32> {
    let g = ConvGeometry::new(in_c, out_c, k, 1, k / 2);
    ConvParams::new(g, rng.normal(g.weight_dims()).unwrap(), rng.normal_vec(out_c, 0.0, 0.1)).unwrap()
}

fn random_bn(rng: &mut Rng, c: usize) -> BnParams<f32> {
    BnParams::new(rng.uniform_vec(c, 0.5, 1.5).unwrap(), rng.normal_vec(c, 0.0, 0.5), DEFAULT_EPS).unwrap()
}

#[test]
fn conv_stats_on_identity() {
    let x = Tensor4D::from_vec((4, 1, 1, 1), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    let (y, st) = fused_conv_stats_fwd(&x, &identity_1x1(1)).unwrap();
    assert_eq!(y.data(), x.data());
    assert_eq!(st.mean[0], 2.5);
    assert!((st.var[0] - 1.25).abs() < 1e-12);
}

#[test]
fn conv_stats_with_zero_weights() {
    let mut rng = Rng::new(3);
    let x = rng.normal::<f64>((2, 3, 4, 4)).unwrap();
    let p = ConvParams::with_weights(ConvGeometry::new(3, 2, 3, 1, 1), Tensor4D::zeros((2, 3, 3, 3)).unwrap()).unwrap();
    let (y, st) = fused_conv_stats_fwd(&x, &p).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_eq!((st.mean.clone(), st.var.clone()), (vec![0.0; 2], vec![0.0; 2]));
}

#[test]
fn norm_relu_conv_constant_propagation() {
    let mut rng = Rng::new(4);
    let x = rng.normal::<f64>((2, 2, 3, 3)).unwrap();
    let st = bn_stats_twopass(&x);
    let bn = BnParams::new(vec![0.0; 2], vec![1.0; 2], DEFAULT_EPS).unwrap();
    let (y, post) = fused_norm_relu_conv_fwd(&x, &st, &bn, &identity_1x1(2)).unwrap();
    assert!(y.data().iter().all(|&v| v == 1.0));
    assert!(post.data().iter().all(|&v| v == 1.0));
}

#[test]
fn norm_relu_conv_full_clipping() {
    let mut rng = Rng::new(5);
    let x = rng.normal::<f64>((2, 2, 3, 3)).unwrap();
    let st = bn_stats_twopass(&x);
    let bn = BnParams::new(vec![1.0; 2], vec![-1e3; 2], DEFAULT_EPS).unwrap();
    let g = ConvGeometry::new(2, 3, 3, 1, 1);
    let conv = ConvParams::new(g, rng.normal(g.weight_dims()).unwrap(), vec![0.5, -1.0, 2.0]).unwrap();
    let (y, post) = fused_norm_relu_conv_fwd(&x, &st, &bn, &conv).unwrap();
    assert!(post.data().iter().all(|&v| v == 0.0));
    for n in 0..2 {
        for (c, b) in [0.5, -1.0, 2.0].into_iter().enumerate() {
            assert!(y.plane(n, c).iter().all(|&v| v == b));
        }
    }
}

#[test]
fn norm_relu_conv_requires_matching_stats() {
    let x = Tensor4D::filled((2, 2, 3, 3), 1.0f64).unwrap();
    let st = bn_stats_twopass(&Tensor4D::filled((2, 3, 3, 3), 1.0f64).unwrap());
    assert!(fused_norm_relu_conv_fwd(&x, &st, &BnParams::identity(2), &identity_1x1(2)).is_err());
}

#[test]
fn zero_gradient_gives_zero_gradients() {
    let mut rng = Rng::new(6);
    let x = rng.normal::<f32>((2, 3, 4, 4)).unwrap();
    let (c1, c2, bn) = (random_conv(&mut rng, 3, 4, 1), random_conv(&mut rng, 4, 2, 3), random_bn(&mut rng, 4));
    let (y1, st) = fused_conv_stats_fwd(&x, &c1).unwrap();
    let (y2, post) = fused_norm_relu_conv_fwd(&y1, &st, &bn, &c2).unwrap();
    let dy = FeatureMap::dense(Tensor4D::zeros(y2.dims()).unwrap());
    let g2 = fused_nrc_bwd(&dy, &y1, &post, &st, &bn, &c2).unwrap();
    let g1 = fused_conv_stats_bwd(&g2.pending, &y1, &x, &c1).unwrap();
    let zero = |v: &[f32]| v.iter().all(|&e| e == 0.0);
    assert!(zero(&g2.dgamma) && zero(&g2.dbeta) && zero(g2.dw.data()) && zero(&g2.dbias));
    assert!(zero(g1.dx.data()) && zero(g1.dw.data()) && zero(&g1.dbias));
}

#[test]
fn physical_concat_accumulates_statistics() {
    let a = Tensor4D::filled((2, 1, 3, 3), 2.0f32).unwrap();
    let b = Tensor4D::filled((2, 1, 3, 3), -5.0f32).unwrap();
    let (fa, fb) = (FeatureMap::dense(a), FeatureMap::dense(b));
    let (y, st) = fused_concat_stats_fwd(&[&fa, &fb], None, true).unwrap();
    assert!(!y.is_view());
    assert_eq!(st.mean, vec![2.0, -5.0]);
    assert_eq!((st.var_clamped(0), st.var_clamped(1)), (0.0, 0.0));
}

#[test]
fn view_concat_needs_input_statistics() {
    let a = FeatureMap::dense(Tensor4D::filled((1, 1, 2, 2), 1.0f32).unwrap());
    assert!(fused_concat_stats_fwd(&[&a, &a], None, false).is_err());
}

/// Each fused forward kernel reads each distinct input once and writes each output once.
#[test]
fn fused_forward_kernels_sweep_once() {
    let mut seen = std::collections::BTreeSet::new();
    for spec in [ModelSpec::densenet_micro(2), ModelSpec::resnet_micro(2)] {
        let g = build_model(&spec).unwrap();
        for level in FusionLevel::ALL {
            let (fg, _) = plan(&g, level).unwrap();
            let ledger = instrument_execution(&fg, 8).unwrap();
            for n in ledger.pass(Pass::Forward) {
                let fused = matches!(
                    n.kind,
                    KindTag::FusedReluConv
                        | KindTag::FusedConvStats
                        | KindTag::FusedNormReluConv
                        | KindTag::FusedConcatStats
                        | KindTag::FusedPoolStats
                );
                if !fused {
                    continue;
                }
                seen.insert(n.kind);
                for e in n.entries.iter().filter(|e| e.tensor.is_feature_map()) {
                    assert_eq!(e.count, 1, "{} {:?} {:?} in {level}", n.label, e.tensor, e.access);
                }
                if n.kind != KindTag::FusedConcatStats {
                    assert!(n.entries.iter().any(|e| e.access == Access::Write), "{} writes nothing", n.label);
                }
            }
        }
    }
    assert!(seen.len() >= 4, "fused kinds exercised: {seen:?}");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut rng = Rng::new(9);
    let x = rng.normal::<f32>((4, 6, 8, 8)).unwrap();
    let (c1, c2, bn) = (random_conv(&mut rng, 6, 8, 1), random_conv(&mut rng, 8, 4, 3), random_bn(&mut rng, 8));
    let dy = FeatureMap::dense(rng.normal::<f32>((4, 4, 8, 8)).unwrap());
    let run = || {
        let (y1, st) = fused_conv_stats_fwd(&x, &c1).unwrap();
        let (y2, post) = fused_norm_relu_conv_fwd(&y1, &st, &bn, &c2).unwrap();
        let g2 = fused_nrc_bwd(&dy, &y1, &post, &st, &bn, &c2).unwrap();
        let g1 = fused_conv_stats_bwd(&g2.pending, &y1, &x, &c1).unwrap();
        (y2, st, g2.dgamma, g2.dw, g1.dx, g1.dw)
    };
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = pool(1).install(run);
    let four = pool(4).install(run);
    assert_eq!(one, four);
    assert_eq!(pool(4).install(run), four);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn forward_pair_matches_sequential(
        n in 1usize..=4, c in 1usize..=8, mid in 1usize..=8, out in 1usize..=8, hw in 1usize..=8,
        k in prop::sample::select(vec![1usize, 3]),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let x = rng.normal::<f32>((n, c, hw, hw)).unwrap();
        let (c1, c2, bn) = (random_conv(&mut rng, c, mid, 1), random_conv(&mut rng, mid, out, k), random_bn(&mut rng, mid));

        let (y1, st) = fused_conv_stats_fwd(&x, &c1).unwrap();
        let y1_ref = conv2d_fwd(&x, &c1).unwrap();
        close("conv", y1_ref.data(), y1.data(), 1e-6);
        stats_close(&bn_stats_twopass(&y1_ref), &st, 1e-5);

        let (y2, post) = fused_norm_relu_conv_fwd(&y1, &st, &bn, &c2).unwrap();
        let post_ref = relu_fwd(&bn_fwd(&y1, &st, &bn).unwrap());
        prop_assert_eq!(post.data(), post_ref.data());
        close("norm-relu-conv", conv2d_fwd(&post_ref, &c2).unwrap().data(), y2.data(), 1e-5);
    }

    #[test]
    fn backward_pair_matches_unfused_chain(
        n in 1usize..=4, c in 1usize..=8, mid in 1usize..=8, out in 1usize..=8, hw in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let x = rng.normal::<f32>((n, c, hw, hw)).unwrap();
        let (c1, c2, bn) = (random_conv(&mut rng, c, mid, 1), random_conv(&mut rng, mid, out, 3), random_bn(&mut rng, mid));
        let (y1, st) = fused_conv_stats_fwd(&x, &c1).unwrap();
        let (y2, post) = fused_norm_relu_conv_fwd(&y1, &st, &bn, &c2).unwrap();
        let dy = rng.normal::<f32>(y2.dims()).unwrap();

        let g2 = fused_nrc_bwd(&FeatureMap::dense(dy.clone()), &y1, &post, &st, &bn, &c2).unwrap();
        let g1 = fused_conv_stats_bwd(&g2.pending, &y1, &x, &c1).unwrap();

        let b = bn_fwd(&y1, &st, &bn).unwrap();
        let r = relu_fwd(&b);
        let rg2 = conv2d_bwd(&r, &dy, &c2).unwrap();
        let db = relu_bwd(&b, &rg2.dx).unwrap();
        let rb = bn_bwd(&y1, &db, &st, &bn).unwrap();
        let rg1 = conv2d_bwd(&x, &rb.dx, &c1).unwrap();

        close("conv2 dw", rg2.dw.data(), g2.dw.data(), 1e-3);
        close("conv2 dbias", &rg2.dbias, &g2.dbias, 1e-3);
        close("dgamma", &rb.dgamma, &g2.dgamma, 1e-3);
        close("dbeta", &rb.dbeta, &g2.dbeta, 1e-3);
        close("bn dx", rb.dx.data(), g2.pending.resolve(&y1).unwrap().data(), 1e-3);
        close("conv1 dx", rg1.dx.data(), g1.dx.data(), 1e-3);
        // BN ahead makes conv1's parameters scale invariant: the bias gradient is
        // zero and dw can cancel to zero, leaving rounding noise on both sides.
        let noise = 1e-4 * rb.dx.data().iter().map(|v| v.abs()).sum::<f32>() * x.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        let near = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 1e-3 * p.abs().max(q.abs()) + noise);
        prop_assert!(near(rg1.dw.data(), g1.dw.data()), "conv1 dw {:?} {:?}", rg1.dw.data(), g1.dw.data());
        prop_assert!(near(&rg1.dbias, &g1.dbias), "conv1 dbias {:?} {:?}", rg1.dbias, g1.dbias);
    }

    #[test]
    fn concat_stats_match_sequential(
        n in 1usize..=4, ca in 1usize..=8, cb in 1usize..=8, hw in 1usize..=8, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let a = FeatureMap::dense(rng.uniform::<f32>((n, ca, hw, hw), -3.0, 3.0).unwrap());
        let b = FeatureMap::dense(rng.uniform::<f32>((n, cb, hw, hw), -3.0, 3.0).unwrap());
        let reference = concat_fwd(&[&a, &b], true).unwrap();
        let ref_stats = bn_stats_twopass(&reference);

        let (y, st) = fused_concat_stats_fwd(&[&a, &b], None, true).unwrap();
        let rt = reference.to_tensor();
        prop_assert_eq!(y.to_tensor(), rt.clone());
        stats_close(&ref_stats, &st, 1e-5);

        let parts = [bn_stats_onepass(&a), bn_stats_onepass(&b)];
        let (v, vst) = fused_concat_stats_fwd(&[&a, &b], Some(&[&parts[0], &parts[1]]), false).unwrap();
        prop_assert!(v.is_view());
        prop_assert_eq!(v.to_tensor(), rt);
        stats_close(&ref_stats, &vst, 1e-5);
    }

    #[test]
    fn split_backward_resolves_bn_gradient(
        n in 1usize..=4, c in 1usize..=8, hw in 1usize..=8, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let x = rng.normal::<f32>((n, c, hw, hw)).unwrap();
        let bn = random_bn(&mut rng, c);
        let st = bn_stats_twopass(&x);
        let (g_bn, g_other) = (rng.normal::<f32>(x.dims()).unwrap(), rng.normal::<f32>(x.dims()).unwrap());

        let (pending, _, _) = sub_bn2_bwd(&x, &FeatureMap::dense(g_bn.clone()), &st, &bn).unwrap();
        let grads = [GradValue::Bn(pending), GradValue::Dense(FeatureMap::dense(g_other.clone()))];
        let fused = fused_split_bwd_bn_dx(&x, &grads).unwrap();

        let bn_dx = bn_bwd(&x, &g_bn, &st, &bn).unwrap().dx;
        let reference = split_bwd(&[&bn_dx, &g_other]).unwrap();
        close("split+bn dx", reference.data(), fused.data(), 1e-3);
    }

    #[test]
    fn pool_stats_match_sequential(n in 1usize..=4, c in 1usize..=8, half in 1usize..=4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rng.normal::<f32>((n, c, 2 * half, 2 * half)).unwrap();
        let geom = PoolGeometry::new(2, 2);
        let (y, st) = fused_pool_stats_fwd(&x, geom).unwrap();
        let reference = avgpool_fwd(&x, geom).unwrap();
        prop_assert_eq!(y.data(), reference.data());
        stats_close(&bn_stats_twopass(&reference), &st, 1e-5);
    }
}
