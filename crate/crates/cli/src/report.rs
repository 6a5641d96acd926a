//! Bench CSV records.

use std::io::Write;

use anyhow::Result;
use bnff::bench::{LevelTiming, Spread};
use bnff::fusion::FusionLevel;
use bnff::traffic::{Totals, TrafficReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub batch: usize,
    pub level: String,
    /// `fwd`, `bwd`, `total`, or `summary`.
    pub pass: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub stddev_ms: f64,
    pub conv_ms: Option<f64>,
    pub non_conv_ms: Option<f64>,
    /// Baseline median over this median; empty without a Baseline run.
    pub speedup: Option<f64>,
    pub fmap_bytes: u64,
    pub weight_bytes: u64,
    pub checksum: f64,
}

#[cfg(test)]
pub const HEADER: &[&str] = &[
    "model",
    "batch",
    "level",
    "pass",
    "median_ms",
    "min_ms",
    "max_ms",
    "stddev_ms",
    "conv_ms",
    "non_conv_ms",
    "speedup",
    "fmap_bytes",
    "weight_bytes",
    "checksum",
];

fn speedup(base: Option<f64>, t: f64) -> Option<f64> {
    base.filter(|_| t > 0.0).map(|b| b / t)
}

pub fn bench_rows(model: &str, batch: usize, timings: &[LevelTiming], traffic: &[TrafficReport]) -> Vec<BenchRow> {
    let base = timings.iter().find(|t| t.level == FusionLevel::Baseline);
    let row = |t: &LevelTiming, pass: &str, s: &Spread, bytes: Totals, base_ms: Option<f64>| BenchRow {
        model: model.to_string(),
        batch,
        level: t.level.name().to_string(),
        pass: pass.to_string(),
        median_ms: s.median,
        min_ms: s.min,
        max_ms: s.max,
        stddev_ms: s.stddev,
        conv_ms: (pass == "total").then_some(t.conv_ms),
        non_conv_ms: (pass == "total").then_some(t.non_conv_ms),
        speedup: speedup(base_ms, s.median),
        fmap_bytes: bytes.fmap_bytes,
        weight_bytes: bytes.weight_bytes,
        checksum: t.checksum,
    };
    let mut rows = vec![];
    for (t, r) in timings.iter().zip(traffic) {
        rows.push(row(t, "fwd", &t.forward, r.forward, base.map(|b| b.forward.median)));
        rows.push(row(t, "bwd", &t.backward, r.backward, base.map(|b| b.backward.median)));
        rows.push(row(t, "total", &t.total, r.total(), base.map(|b| b.total.median)));
    }
    let fastest = timings.iter().zip(traffic).min_by(|a, b| a.0.total.median.total_cmp(&b.0.total.median));
    if let Some((t, r)) = fastest {
        rows.push(row(t, "summary", &t.total, r.total(), base.map(|b| b.total.median)));
    }
    rows
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
