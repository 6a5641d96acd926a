//! Wall-clock measurement of training iterations per fusion level.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{plan, FusionLevel};
use crate::graph::{backward, build_model, forward, synthetic, ExecConfig, Graph, ModelSpec, ParamStore};
use crate::kernels::KernelConfig;
use crate::tensor::Tensor4D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub iters: usize,
    pub warmup: usize,
    pub kernel: KernelConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { iters: 5, warmup: 1, kernel: KernelConfig::default() }
    }
}

/// Location and spread of a sample of timings, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
}

impl Spread {
    pub fn of(samples: &[f64]) -> Spread {
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Spread { median: 0.0, min: 0.0, max: 0.0, stddev: 0.0 };
        }
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        let mean = v.iter().sum::<f64>() / n as f64;
        let stddev = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        Spread { median, min: v[0], max: v[n - 1], stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTiming {
    pub level: FusionLevel,
    pub forward: Spread,
    pub backward: Spread,
    pub total: Spread,
    /// Median per-iteration time inside convolution kernels.
    pub conv_ms: f64,
    pub non_conv_ms: f64,
    /// Digest of the outputs of the last iteration.
    pub checksum: f64,
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Default)]
struct Samples {
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    conv: Vec<f64>,
    other: Vec<f64>,
    checksum: f64,
}

impl Samples {
    /// Runs one forward+backward iteration, recording it unless `warm`.
    fn step(
        &mut self,
        graph: &Graph,
        params: &ParamStore<f32>,
        inputs: &[Tensor4D<f32>],
        grads: &[Tensor4D<f32>],
        exec: &ExecConfig,
        warm: bool,
    ) -> Result<()> {
        let t0 = Instant::now();
        let acts = forward(graph, params, inputs, exec)?;
        let t1 = Instant::now();
        let gb = backward(graph, params, &acts, grads, exec)?;
        let t2 = Instant::now();
        if warm {
            return Ok(());
        }
        self.fwd.push(ms(t1 - t0));
        self.bwd.push(ms(t2 - t1));
        let (mut c, mut o) = (0.0, 0.0);
        for (id, d) in acts.trace.times.iter().chain(&gb.trace.times) {
            if graph.node(*id).tag().is_conv() {
                c += ms(*d);
            } else {
                o += ms(*d);
            }
        }
        self.conv.push(c);
        self.other.push(o);
        self.checksum = acts.checksum()?;
        Ok(())
    }

    fn finish(self, level: FusionLevel) -> LevelTiming {
        let total: Vec<f64> = self.fwd.iter().zip(&self.bwd).map(|(a, b)| a + b).collect();
        LevelTiming {
            level,
            forward: Spread::of(&self.fwd),
            backward: Spread::of(&self.bwd),
            total: Spread::of(&total),
            conv_ms: Spread::of(&self.conv).median,
            non_conv_ms: Spread::of(&self.other).median,
            checksum: self.checksum,
        }
    }
}

fn exec_config(cfg: &BenchConfig) -> Result<ExecConfig> {
    if cfg.iters == 0 {
        return Err(Error::InvalidSpec("iterations must be at least 1".into()));
    }
    Ok(ExecConfig { kernel: cfg.kernel, keep_all: false, timing: true })
}

/// Times `iters` forward+backward iterations of an already-rewritten graph
/// after `warmup` untimed ones.
pub fn bench_graph(
    graph: &Graph,
    level: FusionLevel,
    params: &ParamStore<f32>,
    inputs: &[Tensor4D<f32>],
    grads: &[Tensor4D<f32>],
    cfg: &BenchConfig,
) -> Result<LevelTiming> {
    let exec = exec_config(cfg)?;
    let mut s = Samples::default();
    for i in 0..cfg.warmup + cfg.iters {
        s.step(graph, params, inputs, grads, &exec, i < cfg.warmup)?;
    }
    Ok(s.finish(level))
}

/// Benchmarks `spec` at each level with identical parameters and data.
///
/// Levels take turns iteration by iteration, so drift in machine speed
/// lands on all of them alike.
pub fn bench_model(spec: &ModelSpec, levels: &[FusionLevel], seed: u64, cfg: &BenchConfig) -> Result<Vec<LevelTiming>> {
    let exec = exec_config(cfg)?;
    let g = build_model(spec)?;
    let (params, xs, gys) = synthetic::<f32>(&g, seed)?;
    let graphs = levels.iter().map(|&l| plan(&g, l).map(|p| p.0)).collect::<Result<Vec<_>>>()?;
    let mut samples: Vec<Samples> = levels.iter().map(|_| Samples::default()).collect();
    for i in 0..cfg.warmup + cfg.iters {
        for (fg, s) in graphs.iter().zip(&mut samples) {
            s.step(fg, &params, &xs, &gys, &exec, i < cfg.warmup)?;
        }
    }
    Ok(samples.into_iter().zip(levels).map(|(s, &l)| s.finish(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_samples() {
        let s = Spread::of(&[3.0, 1.0, 2.0]);
        assert_eq!((s.median, s.min, s.max), (2.0, 1.0, 3.0));
        assert_eq!(Spread::of(&[1.0, 2.0, 3.0, 4.0]).median, 2.5);
        assert!((Spread::of(&[1.0, 3.0]).stddev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_checksum() {
        let spec = ModelSpec::densenet_micro(2);
        let cfg = BenchConfig { iters: 1, warmup: 0, ..Default::default() };
        let a = bench_model(&spec, &[FusionLevel::Bnff], 9, &cfg).unwrap();
        let b = bench_model(&spec, &[FusionLevel::Bnff], 9, &cfg).unwrap();
        assert_eq!(a[0].checksum, b[0].checksum);
        assert!(a[0].total.median > 0.0);
        assert!(bench_model(&spec, &[FusionLevel::Bnff], 9, &BenchConfig { iters: 0, ..cfg }).is_err());
    }
}
