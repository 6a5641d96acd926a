use std::path::Path;
use std::process::{Command, Output};

fn bnff(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_bnff")).args(args).output().expect("spawn bnff");
    if out.status.code() == Some(2) {
        panic!("usage error: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|r| r.unwrap()).collect()
}

#[test]
fn bench_writes_level_pass_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = bnff(&["bench", "--model", "densenet-micro", "--fusion", "all", "--batch", "32", "--iters", "1", "--warmup", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let mut r = csv::Reader::from_path(&out).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(&header[2], "level");
    assert_eq!(&header[3], "pass");
    let rows: Vec<_> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5 * 3 + 1);
    for level in ["baseline", "rcf", "rcf+mvf", "bnff", "bnff+icf"] {
        let passes: Vec<_> = rows.iter().filter(|r| &r[2] == level && &r[3] != "summary").map(|r| r[3].to_string()).collect();
        assert_eq!(passes, ["fwd", "bwd", "total"], "{level}");
    }
    assert_eq!(&rows[15][3], "summary");
    assert!(rows.iter().all(|r| &r[1] == "32" && r[4].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn same_seed_same_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let p = dir.path().join(name);
        let o = bnff(&["bench", "--model", "resnet-micro", "--batch", "2", "--iters", "1", "--warmup", "0", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert!(o.status.success());
        read_rows(&p).iter().map(|r| r[13].to_string()).collect::<Vec<_>>()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    assert_eq!(a, b);
    assert!(a[0].parse::<f64>().unwrap().is_finite());
}

#[test]
fn traffic_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traffic.csv");
    let o = bnff(&["traffic", "--model", "resnet50", "--batch", "120", "--fusion", "bnff,bnff+icf", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let rows = read_rows(&out);
    assert!(rows.iter().any(|r| &r[0] == "baseline"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    let levels = json.as_array().unwrap();
    assert_eq!(levels.len(), 3);
    let bnff = &levels[1];
    assert_eq!(bnff["level"], "bnff");
    assert!(bnff["reduction_pct"].as_f64().unwrap() > 0.0);
}

#[test]
fn explain_reports_plan_outcomes() {
    let base = stdout(&bnff(&["explain", "--fusion", "baseline"]));
    assert!(base.contains("level baseline: 0 rewrites"), "{base}");
    let icf = stdout(&bnff(&["explain", "--fusion", "bnff+icf"]));
    assert!(icf.contains("unfused BNs: none"), "{icf}");
    let bnff_text = stdout(&bnff(&["explain", "--fusion", "bnff"]));
    assert!(bnff_text.contains("unfused BNs: n"), "{bnff_text}");
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# explain settings\nmodel = resnet-micro\nfusion = bnff\n").unwrap();
    let text = stdout(&bnff(&["explain", "--config", conf.to_str().unwrap()]));
    assert!(text.starts_with("level bnff:") && text.contains("unit"), "{text}");
    let text = stdout(&bnff(&["explain", "--config", conf.to_str().unwrap(), "--fusion", "rcf"]));
    assert!(text.starts_with("level rcf:"), "{text}");
}

#[test]
fn verify_exit_code_follows_suites() {
    let ok = bnff(&["verify", "--fusion", "baseline,bnff+icf"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.starts_with("PASS")).count(), 4);

    let bad = bnff(&["verify", "--fusion", "bnff+icf", "--fault", "skip-dgamma"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = stdout(&bad);
    let line = text.lines().find(|l| l.contains("gradcheck")).unwrap();
    assert!(line.starts_with("FAIL") && line.contains("gamma"), "{line}");
}

#[test]
fn bad_arguments_are_usage_errors() {
    let o = Command::new(env!("CARGO_BIN_EXE_bnff")).args(["bench", "--iters", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_bnff")).args(["traffic", "--fusion", "warp"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
