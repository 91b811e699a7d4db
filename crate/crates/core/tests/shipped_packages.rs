use std::path::{Path, PathBuf};

use arbiter_core::edlc::{run_golden_suite, GoldenDataset, SuiteOptions};
use arbiter_core::graph::{load_constitution, Constitution};
use arbiter_core::hal::load_fixture;
use arbiter_core::kernel::{run_agent, RunConfig};
use arbiter_core::parallel::Execution;
use arbiter_core::policy::lint_constitution;
use arbiter_core::state::{verify_replay, FlightRecord, HaltReason, ReplayVerdict, RoutingDecision};
use serde_json::Value;

fn package(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../constitutions").join(name)
}

fn load(name: &str) -> Constitution {
    load_constitution(&package(name)).unwrap()
}

fn input(name: &str) -> Value {
    serde_yaml::from_str(&std::fs::read_to_string(package(name).join("input.yaml")).unwrap()).unwrap()
}

#[test]
fn every_shipped_package_loads_and_lints_clean() {
    for name in ["market-report", "competitor-analysis", "summary-review", "governed-react"] {
        let c = load(name);
        let env = c.default_environment().unwrap();
        assert!(c.structure().errors().next().is_none(), "{name}");
        assert!(lint_constitution(&c, c.policy(env).unwrap()).is_empty(), "{name}");
    }
}

#[test]
fn tool_errors_take_exactly_one_fallback_and_finish() {
    for (name, fixture) in [("market-report", "tool_error"), ("governed-react", "tool_outage")] {
        let c = load(name);
        let config = RunConfig::for_constitution(&c).unwrap();
        let backend = load_fixture(&package(name).join(format!("fixtures/{fixture}.yaml"))).unwrap();
        let outcome = run_agent(&c, &config, &backend, input(name)).unwrap();
        let fallbacks = outcome.record.events().iter().filter(|e| matches!(e.routing, RoutingDecision::Fallback { .. })).count();
        assert_eq!(fallbacks, 1, "{name}");
        assert_eq!(outcome.halt, Some(HaltReason::Completed), "{name}");
    }
}

#[test]
fn react_loop_is_bounded_by_the_step_budget() {
    let c = load("governed-react");
    let mut config = RunConfig::for_constitution(&c).unwrap();
    config.limits.max_steps = 20;
    let backend = load_fixture(&package("governed-react").join("fixtures/runaway.yaml")).unwrap();
    let outcome = run_agent(&c, &config, &backend, input("governed-react")).unwrap();
    assert_eq!(outcome.halt, Some(HaltReason::BudgetExhausted));
    assert_eq!(outcome.state.os_metadata().resources().steps_used, 20);
}

#[test]
fn unsafe_actions_are_sent_back_for_another_thought() {
    let c = load("governed-react");
    let config = RunConfig::for_constitution(&c).unwrap();
    let backend = load_fixture(&package("governed-react").join("fixtures/unsafe_action.yaml")).unwrap();
    let outcome = run_agent(&c, &config, &backend, input("governed-react")).unwrap();
    let first_check = &outcome.record.events()[1];
    assert!(first_check.signal.is_fail());
    assert_eq!(first_check.routing, RoutingDecision::Continue { node: "think".into() });
    assert!(outcome.record.events().iter().all(|e| e.node_id != "act" || e.seq > 1));
    assert!(outcome.completed());
}

#[test]
fn golden_suite_is_deterministic_across_execution_modes() {
    let c = load("market-report");
    let dataset = GoldenDataset::load(&package("market-report").join("golden/dataset.yaml")).unwrap();
    let config = RunConfig::for_constitution(&c).unwrap();
    let run = |execution| run_golden_suite(&c, &dataset, &config, &SuiteOptions { execution, ..Default::default() }).unwrap();
    let parallel = run(Execution::Parallel);
    let sequential = run(Execution::Sequential);
    assert_eq!(parallel.to_json(), sequential.to_json());
    assert_eq!(parallel.to_json(), run(Execution::Parallel).to_json());
    assert_eq!(parallel.pass_rate.to_string(), "10/10");
}

#[test]
fn failing_case_traces_are_written_and_replay() {
    let c = load("market-report");
    let root = package("market-report").join("golden");
    let text = std::fs::read_to_string(root.join("dataset.yaml")).unwrap().replace("region: APAC\n    quarter: \"2025-Q1\"\n- id", "region: APAC\n    quarter: \"2025-Q4\"\n- id");
    let dataset = GoldenDataset::parse(&text, &root).unwrap();
    let out = tempfile::tempdir().unwrap();
    let options = SuiteOptions { out_dir: Some(out.path().to_path_buf()), ..Default::default() };
    let report = run_golden_suite(&c, &dataset, &RunConfig::for_constitution(&c).unwrap(), &options).unwrap();
    let failing: Vec<_> = report.cases.iter().filter(|r| !r.pass).collect();
    assert_eq!(failing.len(), 1);
    assert_eq!(failing[0].detail, "mismatch at $.quarter");
    let record = FlightRecord::read(&out.path().join(failing[0].trace.as_ref().unwrap())).unwrap();
    assert_eq!(verify_replay(&record, &c).unwrap(), ReplayVerdict::Equivalent);
}
