use arbiter_core::hal::parse_fixture;
use arbiter_core::kernel::{Kernel, RunConfig};
use arbiter_core::state::{materialize_at, SignalKind};
use arbiter_core::testkit::{firewall_probe, malformed_output};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[test]
fn malformed_outputs_never_reach_user_memory() {
    let constitution = firewall_probe();
    let config = RunConfig::new("Executor");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let bad = malformed_output(&mut rng);
        let backend = parse_fixture(&json!({"responses": {"draft": [{"output": bad, "tokens": 5}]}})).unwrap();
        let outcome = Kernel::new(&constitution, &config, &backend).run(json!({"topic": "tides"})).unwrap();
        let step = &outcome.record.events()[0];
        assert_eq!(step.signal.kind, SignalKind::Fail, "case {i}: {bad}");
        assert_eq!(step.signal.reason.as_deref(), Some("schema violation"), "case {i}: {bad}");
        assert!(step.quarantined, "case {i}");
        for k in 0..=outcome.record.len() {
            let memory = materialize_at(&outcome.record, k).unwrap().user_memory().clone();
            assert_eq!(memory, *json!({"topic": "tides"}).as_object().unwrap(), "case {i} leaked at step {k}: {bad}");
        }
    }
}

#[test]
fn conforming_output_is_committed() {
    let constitution = firewall_probe();
    let config = RunConfig::new("Executor");
    let backend = parse_fixture(&json!({"responses": {"draft": [{"output": {"text": "high at noon"}}]}})).unwrap();
    let outcome = Kernel::new(&constitution, &config, &backend).run(json!({"topic": "tides"})).unwrap();
    assert!(outcome.completed());
    let memory = materialize_at(&outcome.record, 1).unwrap().user_memory().clone();
    assert_eq!(memory.get("text"), Some(&json!("high at noon")));
}
