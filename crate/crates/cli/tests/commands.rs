use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn package(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../constitutions").join(name)
}

fn arbiter(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_arbiter")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run(name: &str, fixture: &str, out: &Path, extra: &[&str]) -> (i32, String) {
    let pkg = package(name);
    let fixture = pkg.join(format!("fixtures/{fixture}.yaml"));
    let input = pkg.join("input.yaml");
    let mut args = vec!["run", s(&pkg), "--fixture", s(&fixture), "--input", s(&input), "--out", s(out)];
    args.extend_from_slice(extra);
    arbiter(&args)
}

#[test]
fn missing_package_is_a_configuration_error() {
    assert_eq!(arbiter(&["lint", "/definitely/not/here"]).0, 2);
    assert_eq!(arbiter(&["run", "/definitely/not/here", "--backend", "echo"]).0, 2);
}

#[test]
fn budget_exhaustion_exits_four() {
    let out = tempfile::tempdir().unwrap();
    let (code, text) = run("market-report", "double_outage", out.path(), &[]);
    assert_eq!(code, 4, "{text}");
    assert!(text.contains("halted: BudgetExhausted"));
}

#[test]
fn rejected_interrupt_is_denied() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run("summary-review", "low_confidence", out.path(), &[]).0, 3);
    let (code, text) = arbiter(&["resume", s(&out.path().join("int-0000.ckpt.json")), "--reject"]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("[resume]"));
}

#[test]
fn replay_detects_edited_traces() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run("market-report", "healthy", out.path(), &[]).0, 0);
    let trace = out.path().join("trace.ndjson");
    let pkg = package("market-report");
    assert_eq!(arbiter(&["replay", s(&trace), s(&pkg)]), (0, "Equivalent\n".into()));
    let text = std::fs::read_to_string(&trace).unwrap();
    std::fs::write(&trace, text.replacen("\"steps_used\":1", "\"steps_used\":2", 1)).unwrap();
    let (code, msg) = arbiter(&["replay", s(&trace), s(&pkg)]);
    assert_eq!(code, 1);
    assert!(msg.starts_with("first divergence at seq 1"), "{msg}");
}

#[test]
fn trace_inspection_shows_state_after_k_events() {
    let out = tempfile::tempdir().unwrap();
    run("market-report", "outage", out.path(), &[]);
    let (code, text) = arbiter(&["trace", s(&out.path().join("trace.ndjson")), "--at", "2"]);
    assert_eq!(code, 0);
    assert!(text.contains("last signal: Fail (Invalid JSON)"), "{text}");
    assert!(text.contains("\"steps_used\":2"));
}

#[test]
fn json_output_is_stable_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run("governed-react", "answer", a.path(), &["--format", "json"]).1;
    let second = run("governed-react", "answer", b.path(), &["--format", "json"]).1;
    let strip = |t: &str| {
        let mut v: Value = serde_json::from_str(t.trim()).unwrap();
        v.as_object_mut().unwrap().remove("trace");
        v
    };
    assert_eq!(strip(&first), strip(&second));
    assert_eq!(strip(&first)["halt"], "completed");
    assert_eq!(
        std::fs::read(a.path().join("trace.ndjson")).unwrap(),
        std::fs::read(b.path().join("trace.ndjson")).unwrap()
    );
}

#[test]
fn eval_reports_json_and_refuses_to_overwrite_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let pkg = package("market-report");
    let dataset = pkg.join("golden/dataset.yaml");
    let baseline = tmp.path().join("baseline.json");
    let traces = tmp.path().join("traces");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", s(&pkg), s(&dataset), "--baseline", s(&baseline), "--out", s(&traces)];
        args.extend_from_slice(extra);
        arbiter(&args)
    };
    let (code, text) = eval(&["--format", "json"]);
    assert_eq!(code, 0);
    let doc: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(doc["report"]["pass_rate"], "10/10");
    assert_eq!(doc["gate"]["decision"], "no_baseline");
    assert_eq!(eval(&["--write-baseline"]).0, 0);
    assert_eq!(eval(&["--write-baseline"]).0, 2);
    assert_eq!(eval(&["--write-baseline", "--force"]).0, 0);
    assert_eq!(eval(&["--sequential"]).0, 0);
    assert!(traces.join("healthy_report_exact.trace.ndjson").exists());
}
