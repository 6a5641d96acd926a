use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bnff::bench::{bench_model, BenchConfig};
use bnff::fusion::{explain, plan_with, ConcatMode, FusionLevel, PlanOptions};
use bnff::graph::{build_model, Graph, ModelSpec};
use bnff::traffic::{count_sweeps, report_model, write_csv, write_json};
use bnff::verify::{run_verify, VerifyConfig};
use clap::{Args, Parser, Subcommand};

mod config;
mod report;

use config::RunConfig;

/// Batch-normalization fission and fusion: benchmarks, verification and
/// memory-traffic reports.
#[derive(Parser, Debug)]
#[command(name = "bnff", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time forward+backward iterations at each fusion level (CSV).
    Bench(Common),
    /// Run the equivalence, gradient, variance and traffic suites.
    Verify(Common),
    /// Modeled memory traffic per level (CSV rows plus JSON summary).
    Traffic(Common),
    /// Print the rewrite table of each fusion level.
    Explain(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// densenet-micro, resnet-micro, densenet121, resnet50 or fd-micro
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    /// Comma-separated levels (baseline, rcf, rcf+mvf, bnff, bnff+icf) or "all"
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Worker threads for the kernels (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; traffic writes <out> as CSV and <out>.json beside it
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value file; flags given on the command line win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also print the fusion plan of each level to stderr
    #[arg(long)]
    explain: bool,
    /// Per-worker on-chip working-set budget in bytes
    #[arg(long)]
    on_chip_budget: Option<usize>,
    /// Concat execution: auto (copies at baseline) or views
    #[arg(long)]
    concat: Option<String>,
    #[arg(long, hide = true)]
    fault: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 11] = [
            ("model", self.model.clone()),
            ("batch", self.batch.map(|v| v.to_string())),
            ("fusion", self.fusion.clone()),
            ("iters", self.iters.map(|v| v.to_string())),
            ("warmup", self.warmup.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("on_chip_budget", self.on_chip_budget.map(|v| v.to_string())),
            ("concat", self.concat.clone()),
            ("fault", self.fault.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v).with_context(|| format!("--{}", k.replace('_', "-")))?;
            }
        }
        cfg.explain |= self.explain;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Rough peak footprint of one training iteration: every activation and
/// its gradient, in f32.
fn footprint(g: &Graph) -> u64 {
    g.slots().map(|s| g.slot_bytes(s.id, 4)).sum::<u64>() * 2
}

fn check_fits(spec: &ModelSpec, g: &Graph) -> Result<()> {
    let (need, Some(avail)) = (footprint(g), available_memory()) else {
        return Ok(());
    };
    if need > avail {
        let per_sample = need / spec.input.n as u64;
        let suggest = (avail / per_sample.max(1)).max(1);
        bail!(
            "model needs about {} MiB at batch {}, {} MiB available; try --batch {suggest}",
            need >> 20,
            spec.input.n,
            avail >> 20
        );
    }
    Ok(())
}

fn plan_opts(cfg: &RunConfig, default: ConcatMode) -> PlanOptions {
    PlanOptions { concat: cfg.concat.unwrap_or(default) }
}

fn print_plans(g: &Graph, levels: &[FusionLevel], opts: PlanOptions, mut out: impl Write) -> Result<()> {
    for &l in levels {
        let (fg, p) = plan_with(g, l, opts)?;
        writeln!(out, "{}", explain(&p, g, &fg))?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.spec()?;
    let g = build_model(&spec)?;
    check_fits(&spec, &g)?;
    if cfg.explain {
        print_plans(&g, &cfg.fusion, PlanOptions::default(), io::stderr().lock())?;
    }
    let bc = BenchConfig { iters: cfg.iters, warmup: cfg.warmup, kernel: cfg.kernel() };
    let timings = bench_model(&spec, &cfg.fusion, cfg.seed, &bc)?;
    let traffic = cfg
        .fusion
        .iter()
        .map(|&l| Ok(count_sweeps(&plan_with(&g, l, PlanOptions::default())?.0, l)?))
        .collect::<Result<Vec<_>>>()?;
    let rows = report::bench_rows(&cfg.model, spec.input.n, &timings, &traffic);
    report::write_bench_csv(&rows, sink(cfg.out.as_deref())?)
}

fn cmd_verify(cfg: &RunConfig) -> Result<bool> {
    let mut vc = VerifyConfig {
        spec: cfg.spec()?,
        levels: cfg.fusion.clone(),
        seed: cfg.seed,
        kernel: cfg.kernel(),
        ..VerifyConfig::default()
    };
    if let [only] = cfg.fusion[..] {
        vc.fd_level = only;
    }
    let report = run_verify(&vc);
    for c in &report.checks {
        println!("{} {:<12} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(p) = &cfg.out {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        serde_json::to_writer_pretty(f, &report)?;
    }
    Ok(report.all_passed())
}

fn cmd_traffic(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.spec()?;
    let mut levels = cfg.fusion.clone();
    if !levels.contains(&FusionLevel::Baseline) {
        levels.insert(0, FusionLevel::Baseline);
    }
    let reports = report_model(&spec, &levels, plan_opts(cfg, ConcatMode::Views))?;
    match &cfg.out {
        Some(p) => {
            write_csv(&reports, BufWriter::new(File::create(p)?))?;
            let json = p.with_extension("json");
            write_json(&reports, BufWriter::new(File::create(&json)?))?;
        }
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{:<10} {:>16} {:>16} {:>16} {:>10} {:>10}", "level", "fwd bytes", "bwd bytes", "total", "relu %", "reduce %")?;
            for r in &reports {
                writeln!(
                    out,
                    "{:<10} {:>16} {:>16} {:>16} {:>10.2} {:>10.2}",
                    r.level.name(),
                    r.forward.bytes(),
                    r.backward.bytes(),
                    r.total().bytes(),
                    r.relu_share_pct(),
                    r.reduction_pct.unwrap_or(0.0)
                )?;
            }
        }
    }
    Ok(())
}

fn cmd_explain(cfg: &RunConfig) -> Result<()> {
    let g = build_model(&cfg.spec()?)?;
    print_plans(&g, &cfg.fusion, plan_opts(cfg, ConcatMode::Auto), sink(cfg.out.as_deref())?)
}

fn run(cli: Cli) -> Result<bool> {
    let (Command::Bench(c) | Command::Verify(c) | Command::Traffic(c) | Command::Explain(c)) = &cli.command;
    let cfg = c.resolve()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Bench(_) => cmd_bench(&cfg)?,
        Command::Verify(_) => return cmd_verify(&cfg),
        Command::Traffic(_) => cmd_traffic(&cfg)?,
        Command::Explain(_) => cmd_explain(&cfg)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "model = resnet-micro\nbatch = 6\nseed = 3\n").unwrap();
        let c = Common { config: Some(p), batch: Some(2), ..Common::default() }.resolve().unwrap();
        assert_eq!((c.model.as_str(), c.batch, c.seed), ("resnet-micro", Some(2), 3));
    }

    #[test]
    fn header_matches_rows() {
        let mut buf = vec![];
        let row = report::BenchRow {
            model: "m".into(),
            batch: 1,
            level: "baseline".into(),
            pass: "fwd".into(),
            median_ms: 1.0,
            min_ms: 1.0,
            max_ms: 1.0,
            stddev_ms: 0.0,
            conv_ms: None,
            non_conv_ms: None,
            speedup: None,
            fmap_bytes: 0,
            weight_bytes: 0,
            checksum: 0.0,
        };
        report::write_bench_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), report::HEADER.join(","));
    }
}
