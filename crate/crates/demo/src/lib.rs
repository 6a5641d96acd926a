//! Browser bindings: traffic per fusion level, fusion plans, and one-pass
//! versus two-pass variance.

use bnff::fusion::{explain, plan, ConcatMode, FusionLevel, PlanOptions};
use bnff::graph::{build_model, ModelSpec};
use bnff::ops::{bn_stats_onepass, bn_stats_twopass};
use bnff::traffic::report_model;
use bnff::{Rng, Tensor4D};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn spec(model: &str, batch: usize) -> Result<ModelSpec, String> {
    let batch = batch.max(1);
    Ok(match model {
        "densenet121" => ModelSpec::densenet121(batch),
        "resnet50" => ModelSpec::resnet50(batch),
        "densenet-micro" => ModelSpec::densenet_micro(batch),
        "resnet-micro" => ModelSpec::resnet_micro(batch),
        other => return Err(format!("unknown model '{other}'")),
    })
}

/// Bytes moved per level, as JSON rows.
pub fn traffic_json(model: &str, batch: usize) -> Result<String, String> {
    let opts = PlanOptions { concat: ConcatMode::Views };
    let reports = report_model(&spec(model, batch)?, &FusionLevel::ALL, opts).map_err(|e| e.to_string())?;
    let rows: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "level": r.level.name(),
                "forward": r.forward.bytes(),
                "backward": r.backward.bytes(),
                "total": r.total().bytes(),
                "relu_share": r.relu_share_pct(),
                "reduction": r.reduction_pct.unwrap_or(0.0),
            })
        })
        .collect();
    Ok(serde_json::Value::Array(rows).to_string())
}

pub fn plan_text(model: &str, level: &str) -> Result<String, String> {
    let level: FusionLevel = level.parse().map_err(|e: bnff::Error| e.to_string())?;
    let g = build_model(&spec(model, 1)?).map_err(|e| e.to_string())?;
    let (fg, p) = plan(&g, level).map_err(|e| e.to_string())?;
    Ok(explain(&p, &g, &fg))
}

/// Variance of `count` f32 samples drawn around `mean`, both ways.
pub fn variance_json(mean: f64, sd: f64, count: usize, seed: u64) -> Result<String, String> {
    let count = count.clamp(2, 1 << 20);
    let mut rng = Rng::new(seed);
    let data = rng.normal_vec::<f32>(count, mean, sd.abs());
    let x = Tensor4D::from_vec((1, 1, 1, count), data).map_err(|e| e.to_string())?;
    let (one, two) = (bn_stats_onepass(&x), bn_stats_twopass(&x));
    let (a, b) = (one.var_clamped(0), two.var[0]);
    let rel = if b > 0.0 { (a - b).abs() / b } else { (a - b).abs() };
    Ok(json!({ "one_pass": a, "two_pass": b, "rel_diff": rel, "mean": two.mean[0] }).to_string())
}

#[wasm_bindgen]
pub fn traffic(model: &str, batch: u32) -> Result<String, JsValue> {
    traffic_json(model, batch as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fusion_plan(model: &str, level: &str) -> Result<String, JsValue> {
    plan_text(model, level).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn variance(mean: f64, sd: f64, count: u32, seed: u32) -> Result<String, JsValue> {
    variance_json(mean, sd, count as usize, seed as u64).map_err(|e| JsValue::from_str(&e))
}
