use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Totals, TrafficReport};
use crate::error::{Error, Result};
use crate::fusion::FusionLevel;

/// One CSV row: a node's sweeps in one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub level: String,
    pub node: usize,
    pub kind: String,
    pub label: String,
    pub pass: String,
    pub reads: u64,
    pub writes: u64,
    /// Feature-map bytes.
    pub bytes: u64,
    pub weight_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSummary {
    pub level: FusionLevel,
    pub forward: Totals,
    pub backward: Totals,
    pub conv: Totals,
    pub non_conv: Totals,
    pub total_bytes: u64,
    pub relu_share_pct: f64,
    pub reduction_pct: Option<f64>,
}

impl From<&TrafficReport> for TrafficSummary {
    fn from(r: &TrafficReport) -> Self {
        TrafficSummary {
            level: r.level,
            forward: r.forward,
            backward: r.backward,
            conv: r.conv,
            non_conv: r.non_conv,
            total_bytes: r.total().bytes(),
            relu_share_pct: r.relu_share_pct(),
            reduction_pct: r.reduction_pct,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_csv(reports: &[TrafficReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for n in &r.ledger.nodes {
            w.serialize(TrafficRow {
                level: r.level.name().to_string(),
                node: n.node.0,
                kind: n.kind.name().to_string(),
                label: n.label.clone(),
                pass: n.pass.name().to_string(),
                reads: n.reads(),
                writes: n.writes(),
                bytes: n.fmap_bytes(),
                weight_bytes: n.weight_bytes(),
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<TrafficRow>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn write_json(reports: &[TrafficReport], out: impl Write) -> Result<()> {
    let summaries: Vec<TrafficSummary> = reports.iter().map(TrafficSummary::from).collect();
    serde_json::to_writer_pretty(out, &summaries).map_err(|e| Error::Io(e.to_string()))
}
