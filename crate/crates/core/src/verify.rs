//! Verification suites: fused-vs-baseline equivalence, finite-difference
//! gradients on the f64 path, one-pass vs two-pass variance, and analytic vs
//! measured traffic.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{plan, FusionLevel};
use crate::graph::{
    backward, build_model, forward, synthetic, ExecConfig, Graph, LayerKind, ModelSpec, ParamScalar, ParamStore,
    SlotShape,
};
use crate::kernels::KernelConfig;
use crate::ops::{bn_stats_onepass, bn_stats_twopass};
use crate::rng::Rng;
use crate::tensor::{Dims, Real, Tensor4D};
use crate::traffic::{analytic_ledger, compare_ledgers, instrument_execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst offender or summary line.
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    /// Model for the equivalence and traffic suites.
    pub spec: ModelSpec,
    /// Small model for finite differences.
    pub fd_spec: ModelSpec,
    pub fd_level: FusionLevel,
    pub levels: Vec<FusionLevel>,
    pub seed: u64,
    pub kernel: KernelConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            spec: ModelSpec::densenet_micro(4),
            fd_spec: fd_default_spec(),
            fd_level: FusionLevel::BnffIcf,
            levels: FusionLevel::ALL.to_vec(),
            seed: 1,
            kernel: KernelConfig::default(),
        }
    }
}

/// Two dense blocks of two layers, k = 4, on a 2×4×6×6 input (under 5k
/// parameters).
pub fn fd_default_spec() -> ModelSpec {
    ModelSpec::densenet_small(&[2, 2], 4, Dims::new(2, 4, 6, 6))
}

/// `|a-b| <= rel·max(|a|,|b|) + rel·scale`, with `scale` the largest
/// magnitude in the reference tensor.
pub fn within<T: Real>(reference: &[T], other: &[T], rel: f64) -> std::result::Result<(), (usize, f64, f64)> {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (a, b)) in reference.iter().zip(other).enumerate() {
        let (a, b) = (a.as_f64(), b.as_f64());
        let excess = (a - b).abs() - rel * (a.abs().max(b.abs()) + scale);
        if (excess > 0.0 || excess.is_nan()) && worst.is_none_or(|w| excess > w.3 || excess.is_nan()) {
            worst = Some((i, a, b, excess));
        }
    }
    if reference.len() != other.len() {
        return Err((reference.len().min(other.len()), f64::NAN, f64::NAN));
    }
    match worst {
        Some((i, a, b, _)) => Err((i, a, b)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Slots compared per level.
    pub compared: Vec<(FusionLevel, usize)>,
    /// Offending tensors, worst element each.
    pub failures: Vec<String>,
}

/// Runs every level on the same parameters and data (f32) and compares
/// each surviving activation and every gradient against Baseline.
pub fn check_equivalence(
    spec: &ModelSpec,
    levels: &[FusionLevel],
    seed: u64,
    act_rel: f64,
    grad_rel: f64,
    kernel: KernelConfig,
) -> Result<EquivalenceReport> {
    let g = build_model(spec)?;
    let (params, xs, gys) = synthetic::<f32>(&g, seed)?;
    let cfg = ExecConfig { kernel: KernelConfig { fault: None, ..kernel }, keep_all: true, timing: false };
    let base = forward(&g, &params, &xs, &cfg)?;
    let base_g = backward(&g, &params, &base, &gys, &cfg)?;
    let mut rep = EquivalenceReport { compared: vec![], failures: vec![] };
    let cfg = ExecConfig { kernel, ..cfg };
    for &level in levels {
        let (fg, _) = plan(&g, level)?;
        let acts = forward(&fg, &params, &xs, &cfg)?;
        let grads = backward(&fg, &params, &acts, &gys, &cfg)?;
        let mut n = 0;
        for s in base.slots().intersection(&acts.slots()) {
            if !matches!(fg.slot(*s).shape, SlotShape::Map(_)) {
                continue;
            }
            n += 1;
            let (a, b) = (base.map(*s)?.to_tensor(), acts.map(*s)?.to_tensor());
            if let Err((i, x, y)) = within(a.data(), b.data(), act_rel) {
                rep.failures.push(format!("{level}: activation {s} element {i}: {x} vs {y}"));
            }
        }
        for (decl, (pa, pb)) in g.params().iter().zip(base_g.params.iter().zip(&grads.params)) {
            if let Err((i, x, y)) = within(&pa.flat(), &pb.flat(), grad_rel) {
                rep.failures.push(format!("{level}: gradient of {} element {i}: {x} vs {y}", decl.name));
            }
        }
        for (i, (a, b)) in base_g.inputs.iter().zip(&grads.inputs).enumerate() {
            if let Err((j, x, y)) = within(a.data(), b.data(), grad_rel) {
                rep.failures.push(format!("{level}: input gradient {i} element {j}: {x} vs {y}"));
            }
        }
        rep.compared.push((level, n));
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradMismatch {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel: f64,
    /// In backward execution order, so the first entry is the earliest
    /// gradient to go wrong (errors propagate upstream from there).
    pub failures: Vec<GradMismatch>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GradMismatch> {
        self.failures.iter().max_by(|a, b| a.rel.total_cmp(&b.rel))
    }
}

/// Position of the first backward step that produces each parameter's
/// gradient.
fn backward_rank(g: &Graph) -> Vec<usize> {
    let mut rank = vec![usize::MAX; g.params().len()];
    for (i, &id) in g.topo_order().iter().rev().enumerate() {
        let n = g.node(id);
        let mut ps = vec![];
        if let LayerKind::Conv(c) = n.kind {
            ps.push(c.param);
        }
        ps.extend(n.kind.bn_param());
        for p in ps {
            rank[p.0] = rank[p.0].min(i);
        }
    }
    rank
}

pub fn scalar_name(g: &Graph, s: ParamScalar) -> String {
    let (what, j) = match s {
        ParamScalar::Weight(_, j) => ("weight", j),
        ParamScalar::Bias(_, j) => ("bias", j),
        ParamScalar::Gamma(_, j) => ("gamma", j),
        ParamScalar::Beta(_, j) => ("beta", j),
    };
    format!("{}.{what}[{j}]", g.param(s.param()).name)
}

fn loss(g: &Graph, params: &ParamStore<f64>, xs: &[Tensor4D<f64>], gys: &[Tensor4D<f64>], cfg: &ExecConfig) -> Result<f64> {
    let out = forward(g, params, xs, cfg)?.outputs()?;
    Ok(out.iter().zip(gys).map(|(o, w)| o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()).sum())
}

/// Central differences of `L = Σ output·G` for every parameter scalar of
/// `spec` rewritten to `level`, against the executor's backward (f64).
///
/// Relative error is `|a-n| / max(|a|, |n|, 1e-6·max(1, max|a|))`; the floor
/// keeps gradients that vanish analytically (conv bias ahead of BN) from
/// dividing rounding noise by zero.
pub fn gradcheck(
    spec: &ModelSpec,
    level: FusionLevel,
    seed: u64,
    step: f64,
    rel_tol: f64,
    kernel: KernelConfig,
) -> Result<GradcheckReport> {
    let g0 = build_model(spec)?;
    let (g, _) = plan(&g0, level)?;
    let (mut params, xs, gys) = synthetic::<f64>(&g, seed)?;
    let cfg = ExecConfig { kernel, ..ExecConfig::default() };
    let acts = forward(&g, &params, &xs, &cfg)?;
    let grads = backward(&g, &params, &acts, &gys, &cfg)?;
    let scalars = params.scalars();
    let analytic: Vec<f64> = scalars.iter().map(|&s| grads.params[s.param().0].scalar(s)).collect();
    let floor = 1e-6 * analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let rank = backward_rank(&g);
    let mut failing = vec![];
    let mut rep = GradcheckReport { checked: 0, max_rel: 0.0, failures: vec![] };
    for (&s, &a) in scalars.iter().zip(&analytic) {
        let v = params.scalar(s);
        params.set_scalar(s, v + step);
        let lp = loss(&g, &params, &xs, &gys, &cfg)?;
        params.set_scalar(s, v - step);
        let lm = loss(&g, &params, &xs, &gys, &cfg)?;
        params.set_scalar(s, v);
        let n = (lp - lm) / (2.0 * step);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        rep.checked += 1;
        rep.max_rel = rep.max_rel.max(rel);
        if rel > rel_tol || rel.is_nan() {
            failing.push((rank[s.param().0], GradMismatch { name: scalar_name(&g, s), analytic: a, numeric: n, rel }));
        }
    }
    failing.sort_by_key(|f| f.0);
    rep.failures = failing.into_iter().map(|f| f.1).collect();
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvfReport {
    pub channels: usize,
    pub max_rel: f64,
    pub worst_channel: usize,
}

/// One-pass `E(x²)-E(x)²` against two-pass variance on uniform data in
/// `[-100, 100]`.
pub fn check_mvf(channels: usize, seed: u64) -> Result<MvfReport> {
    let mut rng = Rng::new(seed);
    let x: Tensor4D<f32> = rng.uniform((4, channels, 8, 8), -100.0, 100.0)?;
    let one = bn_stats_onepass(&x);
    let two = bn_stats_twopass(&x);
    let mut rep = MvfReport { channels, max_rel: 0.0, worst_channel: 0 };
    for c in 0..channels {
        let rel = (one.var[c] - two.var[c]).abs() / two.var[c].abs();
        if rel > rep.max_rel || rel.is_nan() {
            rep = MvfReport { max_rel: rel, worst_channel: c, ..rep };
        }
    }
    Ok(rep)
}

/// Analytic and instrumented ledgers at every level; the error names the
/// first divergent node.
pub fn check_traffic(spec: &ModelSpec, levels: &[FusionLevel], seed: u64) -> Result<()> {
    let g = build_model(spec)?;
    for &level in levels {
        let (fg, _) = plan(&g, level)?;
        compare_ledgers(&analytic_ledger(&fg)?, &instrument_execution(&fg, seed)?)
            .map_err(|e| crate::Error::Mismatch(format!("{level}: {e}")))?;
    }
    Ok(())
}

pub const ACT_REL_TOL: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Whole-network step. Larger steps move thousands of pre-ReLU values, and
/// the ones that cross zero bend the difference quotient.
pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-2;
pub const MVF_REL_TOL: f64 = 1e-4;

fn outcome(name: &str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome { name: name.into(), passed, detail },
        Err(e) => CheckOutcome { name: name.into(), passed: false, detail: e.to_string() },
    }
}

/// All four suites.
pub fn run_verify(cfg: &VerifyConfig) -> VerifyReport {
    let mut checks = vec![];
    checks.push(outcome(
        "equivalence",
        check_equivalence(&cfg.spec, &cfg.levels, cfg.seed, ACT_REL_TOL, GRAD_REL_TOL, cfg.kernel).map(|r| {
            let n: usize = r.compared.iter().map(|c| c.1).sum();
            match r.failures.first() {
                None => (true, format!("{n} activations over {} levels", r.compared.len())),
                Some(f) => (false, format!("{} failures; first: {f}", r.failures.len())),
            }
        }),
    ));
    checks.push(outcome(
        "gradcheck",
        gradcheck(&cfg.fd_spec, cfg.fd_level, cfg.seed, FD_STEP, FD_REL_TOL, cfg.kernel).map(|r| {
            match (r.failures.first(), r.worst()) {
                (Some(f), Some(w)) => (
                    false,
                    format!(
                        "{} of {} scalars fail; first in backward order {}: analytic {:.6e} numeric {:.6e} \
                         rel {:.2e}; worst {} rel {:.2e}",
                        r.failures.len(),
                        r.checked,
                        f.name,
                        f.analytic,
                        f.numeric,
                        f.rel,
                        w.name,
                        w.rel
                    ),
                ),
                _ => (true, format!("{} scalars, max rel err {:.2e}", r.checked, r.max_rel)),
            }
        }),
    ));
    checks.push(outcome(
        "mvf",
        check_mvf(100, cfg.seed).map(|r| {
            (r.max_rel <= MVF_REL_TOL, format!("max rel {:.2e} at channel {}", r.max_rel, r.worst_channel))
        }),
    ));
    checks.push(outcome(
        "traffic",
        check_traffic(&cfg.spec, &cfg.levels, cfg.seed).map(|()| (true, format!("{} levels agree", cfg.levels.len()))),
    ));
    VerifyReport { checks }
}
