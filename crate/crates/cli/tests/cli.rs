use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn pot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pot")).args(args).output().expect("run pot")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Small grid so each test calibrates in a fraction of a second.
const SMALL: &str = r#"{"calibration": {"grid": {"n1": 16, "nv": 12, "n2": 24}}}"#;

fn calibrated(dir: &Path) -> PathBuf {
    let cfg = write(dir, "small.json", SMALL);
    let out = dir.join("cal");
    let o = pot(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("model.json")
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn calibration_is_deterministic_and_writes_diagnostics() {
    let dir = TempDir::new().unwrap();
    let model = calibrated(dir.path());
    let first = fs::read(&model).unwrap();
    calibrated(dir.path());
    assert_eq!(first, fs::read(&model).unwrap());
    let cal = model.parent().unwrap();
    for f in ["diagnostics.json", "residuals.csv", "marginal_errors.csv", "trace.csv", "smile_fit.csv"] {
        assert!(cal.join(f).is_file(), "missing {f}");
    }
    let d: Value = serde_json::from_str(&fs::read_to_string(cal.join("diagnostics.json")).unwrap()).unwrap();
    assert!(d["fisher_min_eigenvalue"].as_f64().unwrap() > 0.0);
    assert_eq!(csv_rows(&cal.join("residuals.csv")).len(), 16 * 12);
}

#[test]
fn malformed_json_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"calibration\": {\"eps_marg\": }");
    let o = pot(&["calibrate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    let unknown = write(dir.path(), "unknown.json", "{\"calibrtion\": {}}");
    assert_eq!(pot(&["calibrate", "--config", s(&unknown)]).status.code(), Some(2));
    let invalid = write(dir.path(), "invalid.json", "{\"calibration\": {\"eps_marg\": -1.0}}");
    assert_eq!(pot(&["calibrate", "--config", s(&invalid)]).status.code(), Some(2));
}

#[test]
fn zero_scenario_gives_zero_sensitivities() {
    let dir = TempDir::new().unwrap();
    let model = calibrated(dir.path());
    let sc = write(dir.path(), "zero.json", r#"{"kind": "spot", "size": 0.0}"#);
    for method in ["lr", "dr", "recalib"] {
        let out = dir.path().join(method);
        let o = pot(&["risk", method, "--model", s(&model), "--scenario", s(&sc), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let rows = csv_rows(&out.join("risk.csv"));
        assert_eq!(rows.len(), 18);
        assert!(rows.iter().all(|r| r[3].parse::<f64>().unwrap() == 0.0), "{method}");
    }
}

#[test]
fn comparing_a_risk_file_with_itself_gives_zero_gaps() {
    let dir = TempDir::new().unwrap();
    let model = calibrated(dir.path());
    let payoffs = write(
        dir.path(),
        "payoffs.json",
        r#"[{"id": "fut", "type": "vix_future"}, {"id": "c20", "type": "vix_call", "strike": 0.2},
            {"id": "joint", "type": "joint"}]"#,
    );
    let out = dir.path().join("lr");
    let o = pot(&["risk", "lr", "--model", s(&model), "--payoffs", s(&payoffs), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let risk = out.join("risk.csv");
    let cmp = dir.path().join("cmp");
    assert!(pot(&["compare", s(&risk), s(&risk), "--out", s(&cmp)]).status.success());
    let rows = csv_rows(&cmp.join("comparison.csv"));
    assert_eq!(rows.len(), 3 * 3);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() == 0.0));
    assert!(dir.path().join("lr/timing.json").is_file());
}

#[test]
fn lr_and_recalibration_agree_through_the_cli() {
    let dir = TempDir::new().unwrap();
    let model = calibrated(dir.path());
    for m in ["lr", "recalib"] {
        let o = pot(&["risk", m, "--model", s(&model), "--out", s(&dir.path().join(m))]);
        assert!(o.status.success());
    }
    let cmp = dir.path().join("cmp");
    let o = pot(&["compare", s(&dir.path().join("lr/risk.csv")), s(&dir.path().join("recalib/risk.csv")), "--out", s(&cmp)]);
    assert!(o.status.success());
    let worst = csv_rows(&cmp.join("comparison.csv")).iter().map(|r| r[4].parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "worst gap {worst}");
}

#[test]
fn missing_model_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let o = pot(&["risk", "lr", "--model", s(&dir.path().join("nope.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_backtest_writes_headers_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "bt.json",
        r#"{"backtest": {"days": 25, "n_portfolios": 0, "calibration": {"grid": {"n1": 16, "nv": 12, "n2": 24}}}}"#,
    );
    let out = dir.path().join("bt");
    let o = pot(&["backtest", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("pnl.csv")).unwrap().trim(), "date,portfolio,pot,benchmark");
    assert_eq!(fs::read_to_string(out.join("stdev.csv")).unwrap().trim(), "portfolio,pot,benchmark,diff");
}

/// Numeric fields within a relative tolerance, everything else exactly.
fn close(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            (x - y).abs() <= 1e-9 * y.abs().max(1.0)
        }
        (Value::Object(x), Value::Object(y)) => x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| close(v, w))),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(v, w)| close(v, w)),
        _ => a == b,
    }
}

#[test]
fn small_backtest_matches_the_golden_summary() {
    let dir = TempDir::new().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let out = dir.path().join("bt");
    let o = pot(&["backtest", "--config", s(&golden.join("backtest_small.json")), "--seed", "11", "--threads", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let want: Value = serde_json::from_str(&fs::read_to_string(golden.join("summary_small.json")).unwrap()).unwrap();
    assert!(close(&got, &want), "got {got}");
}
