use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[model]
channels = 5
hidden_units = 8
t0 = 3
t1 = 3

[protocol]
mode = "sparse"
rounds = 2
clients = 2

[dataset]
samples = 8
height = 16
width = 16

[[baselines]]
name = "small"
params = 20000

[bench]
repeats = 1
"#;

fn fednca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fednca")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("run");
    let o = fednca(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["round_reports.csv", "ledger.csv", "model.fnca", "summary.json"] {
        let len = std::fs::metadata(out.join(f)).unwrap().len();
        assert!(len > 0, "{f} is empty");
    }
    let reports = std::fs::read_to_string(out.join("round_reports.csv")).unwrap();
    assert!(reports.starts_with("# schema: round_report/1\n"));
    assert_eq!(reports.lines().count(), 2 + 2);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(fednca(&["train", "--config", s(&cfg), "--out", s(out)]).status.code(), Some(0));
    }
    for f in ["round_reports.csv", "ledger.csv", "model.fnca"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn invalid_field_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("[dataset]", "[compression]\nk_percent = 0\n\n[dataset]");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let o = fednca(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("compression.k_percent"));
}

#[test]
fn unknown_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TINY.replace("rounds = 2", "rounds = 2\nround = 3"));
    let o = fednca(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("round"));
}

#[test]
fn missing_config_exits_one() {
    let o = fednca(&["train", "--config", "/nonexistent/cfg.toml", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(fednca(&["train"]).status.code(), Some(1));
    assert_eq!(fednca(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fednca(&["--help"]).status.code(), Some(0));
}

#[test]
fn report_without_files_exits_one() {
    assert_eq!(fednca(&["report"]).status.code(), Some(1));
}

#[test]
fn report_on_unknown_schema_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "x.csv", "# schema: mystery/9\na,b\n1,2\n");
    assert_eq!(fednca(&["report", s(&p)]).status.code(), Some(2));
    let p = write_config(dir.path(), "y.csv", "a,b\n1,2\n");
    assert_eq!(fednca(&["report", s(&p)]).status.code(), Some(2));
}

fn ledger_sums(path: &Path) -> (u64, u64) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().skip(1);
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let dir = header.iter().position(|h| *h == "direction").unwrap();
    let bytes = header.iter().position(|h| *h == "bytes").unwrap();
    let (mut up, mut down) = (0, 0);
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let b: u64 = f[bytes].parse().unwrap();
        match f[dir] {
            "up" => up += b,
            "down" => down += b,
            other => panic!("direction {other}"),
        }
    }
    (up, down)
}

#[test]
fn report_totals_match_ledger_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("run");
    assert_eq!(fednca(&["train", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(0));
    let (up, down) = ledger_sums(&out.join("ledger.csv"));

    let o = fednca(&["report", "--json", s(&out.join("round_reports.csv")), s(&out.join("ledger.csv"))]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for f in v["files"].as_array().unwrap() {
        assert_eq!(f["up_bytes"].as_u64(), Some(up));
        assert_eq!(f["down_bytes"].as_u64(), Some(down));
        assert_eq!(f["rounds"].as_u64(), Some(2));
    }
    assert_eq!(v["ratios"][0]["total_mib_vs_first"].as_f64(), Some(1.0));

    let text = fednca(&["report", s(&out.join("ledger.csv"))]);
    assert_eq!(text.status.code(), Some(0));
    assert!(!text.stdout.is_empty());
}

#[test]
fn benches_run_and_write_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("bench");
    let o = fednca(&["bench-compression", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bench_compression.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 6);

    let o = fednca(&["bench-he", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bench_he.json")).unwrap()).unwrap();
    for r in rows.as_array().unwrap() {
        assert_eq!(r["ciphertexts"], r["expected_ciphertexts"]);
    }
}
