use arbiter_core::kernel::{Kernel, RunConfig};
use arbiter_core::state::{verify_replay, FlightRecord, ReplayVerdict};
use arbiter_core::testkit::random_agent;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_agents_replay_equivalent_and_rerun_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut halts = std::collections::BTreeMap::new();
    for i in 0..200 {
        let agent = random_agent(&mut rng, 8);
        let mut config = RunConfig::new("Executor");
        config.limits.max_steps = agent.max_steps;
        let first = Kernel::new(&agent.constitution, &config, &agent.backend()).run(agent.input.clone()).unwrap();
        let second = Kernel::new(&agent.constitution, &config, &agent.backend()).run(agent.input.clone()).unwrap();
        assert_eq!(first.record.to_ndjson(), second.record.to_ndjson(), "agent {i} reran differently");
        let verdict = verify_replay(&first.record, &agent.constitution).unwrap();
        assert_eq!(verdict, ReplayVerdict::Equivalent, "agent {i}");
        let reread = FlightRecord::from_ndjson(&first.record.to_ndjson()).unwrap();
        assert_eq!(verify_replay(&reread, &agent.constitution).unwrap(), ReplayVerdict::Equivalent, "agent {i} after reread");
        *halts.entry(format!("{:?}", first.halt)).or_insert(0) += 1;
    }
    assert!(halts.len() >= 3, "runs should end in varied ways: {halts:?}");
}
