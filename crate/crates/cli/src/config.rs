//! Run configuration: defaults, then a key=value file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bnff::fusion::{ConcatMode, FusionLevel};
use bnff::graph::ModelSpec;
use bnff::kernels::{Fault, KernelConfig};
use bnff::verify::fd_default_spec;

pub const MODELS: &[&str] = &["densenet-micro", "resnet-micro", "densenet121", "resnet50", "fd-micro"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub batch: Option<usize>,
    pub fusion: Vec<FusionLevel>,
    pub iters: usize,
    pub warmup: usize,
    pub threads: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub on_chip_budget: Option<usize>,
    pub explain: bool,
    pub concat: Option<ConcatMode>,
    pub fault: Option<Fault>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "densenet-micro".into(),
            batch: None,
            fusion: FusionLevel::ALL.to_vec(),
            iters: 5,
            warmup: 1,
            threads: None,
            seed: 1,
            out: None,
            on_chip_budget: None,
            explain: false,
            concat: None,
            fault: None,
        }
    }
}

pub fn parse_levels(s: &str) -> Result<Vec<FusionLevel>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(FusionLevel::ALL.to_vec());
    }
    let mut v = s.split(',').map(|p| p.parse::<FusionLevel>().map_err(|e| anyhow!(e))).collect::<Result<Vec<_>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

pub fn parse_concat(s: &str) -> Result<ConcatMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "auto" => Ok(ConcatMode::Auto),
        "views" | "view" => Ok(ConcatMode::Views),
        other => bail!("unknown concat mode '{other}' (expected auto or views)"),
    }
}

pub fn parse_fault(s: &str) -> Result<Option<Fault>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" | "" => Ok(None),
        "skip-dgamma" => Ok(Some(Fault::SkipDgamma)),
        other => bail!("unknown fault '{other}'"),
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => bail!("expected a boolean, got '{other}'"),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn read_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key=value", i + 1))?;
        map.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = RunConfig::default();
        for (k, v) in read_kv(&text)? {
            cfg.set(&k, &v).with_context(|| format!("{}: key '{k}'", path.display()))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = value.to_string(),
            "batch" => self.batch = Some(value.parse()?),
            "fusion" => self.fusion = parse_levels(value)?,
            "iters" | "iterations" => self.iters = value.parse()?,
            "warmup" => self.warmup = value.parse()?,
            "threads" => self.threads = Some(value.parse()?),
            "seed" => self.seed = value.parse()?,
            "out" => self.out = Some(PathBuf::from(value)),
            "on_chip_budget" => self.on_chip_budget = Some(value.parse()?),
            "explain" => self.explain = parse_bool(value)?,
            "concat" => self.concat = Some(parse_concat(value)?),
            "fault" => self.fault = parse_fault(value)?,
            _ => bail!("unknown key"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            bail!("iters must be at least 1");
        }
        if self.batch == Some(0) {
            bail!("batch must be at least 1");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        if self.fusion.is_empty() {
            bail!("no fusion levels selected");
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let spec = match self.model.to_ascii_lowercase().as_str() {
            "densenet-micro" | "densenet_micro" => ModelSpec::densenet_micro(4),
            "resnet-micro" | "resnet_micro" => ModelSpec::resnet_micro(4),
            "densenet121" | "densenet-121" => ModelSpec::densenet121(120),
            "resnet50" | "resnet-50" => ModelSpec::resnet50(120),
            "fd-micro" => fd_default_spec(),
            other => bail!("unknown model '{other}'; expected one of {}", MODELS.join(", ")),
        };
        Ok(match self.batch {
            Some(b) => spec.with_batch(b),
            None => spec,
        })
    }

    pub fn kernel(&self) -> KernelConfig {
        let mut k = KernelConfig { fault: self.fault, ..KernelConfig::default() };
        if let Some(b) = self.on_chip_budget {
            k.on_chip_budget = b;
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_lines() {
        let m = read_kv("# run\nmodel = resnet-micro\n\nbatch=8 # small\non-chip-budget = 4096\n").unwrap();
        assert_eq!(m["model"], "resnet-micro");
        assert_eq!(m["batch"], "8");
        assert_eq!(m["on_chip_budget"], "4096");
        assert!(read_kv("model resnet").is_err());
    }

    #[test]
    fn levels() {
        assert_eq!(parse_levels("all").unwrap().len(), 5);
        assert_eq!(parse_levels("bnff,baseline").unwrap(), vec![FusionLevel::Baseline, FusionLevel::Bnff]);
        assert!(parse_levels("fast").is_err());
    }

    #[test]
    fn settings_apply() {
        let mut c = RunConfig::default();
        c.set("fusion", "rcf+mvf").unwrap();
        c.set("batch", "3").unwrap();
        assert_eq!(c.fusion, vec![FusionLevel::RcfMvf]);
        assert_eq!(c.spec().unwrap().input.n, 3);
        assert!(c.set("colour", "red").is_err());
        c.iters = 0;
        assert!(c.validate().is_err());
    }
}
