use std::collections::BTreeMap;

use arbiter_core::acf::{load_binding, validate_schema, CoreId, InstructionSet, SchemaRegistry, SchemaSpec};
use arbiter_core::edlc::{gate_regression, Baseline, EvalReport, GateDecision, GateThresholds};
use arbiter_core::hal::BackendResponse;
use arbiter_core::kernel::{Kernel, RunConfig, RunOutcome};
use arbiter_core::policy::{lint_constitution, Location, PolicySet, Semantics, Verdict};
use arbiter_core::state::{materialize_at, FlightRecord, RoutingDecision, Signal, SignalKind};
use arbiter_core::testkit::{random_agent, RandomAgent};
use arbiter_core::verify::{combine_ensemble, interpret_judge};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn agent(seed: u64) -> RandomAgent {
    random_agent(&mut ChaCha8Rng::seed_from_u64(seed), 8)
}

fn run(agent: &RandomAgent) -> RunOutcome {
    let mut config = RunConfig::new("Executor");
    config.limits.max_steps = agent.max_steps;
    Kernel::new(&agent.constitution, &config, &agent.backend()).run(agent.input.clone()).unwrap()
}

fn arb_json() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i32>().prop_map(Value::from),
        (-1e6f64..1e6).prop_map(Value::from),
        "[a-z]{0,6}".prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
            prop::collection::btree_map("(text|score|done|[a-z]{1,4})", inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn schema_docs() -> Vec<Value> {
    vec![
        json!("any"),
        json!("string"),
        json!({"text": "string", "score": "number?"}),
        json!({"done": "boolean", "items": {"type": "list", "items": "string"}}),
        json!({"mode": {"type": "enum", "values": ["fast", "slow"]}, "n": {"type": "number", "min": 0, "max": 10}}),
        json!({"code": {"type": "string", "pattern": "^[A-Z]{3}$"}, "note": {"type": "string", "nullable": true}}),
    ]
}

fn parse_schema(doc: &Value) -> SchemaSpec {
    SchemaSpec::parse(doc, &|_| None).unwrap()
}

fn report(cases: &[(String, bool)]) -> EvalReport {
    let passes = cases.iter().filter(|c| c.1).count();
    serde_json::from_value(json!({
        "constitution_hash": "c",
        "fixture_hash": "f",
        "cases": cases.iter().map(|(id, pass)| json!({
            "id": id, "mode": "output", "pass": pass, "detail": "", "tokens": 0, "steps": 0
        })).collect::<Vec<_>>(),
        "pass_rate": format!("{passes}/{}", cases.len()),
        "pass_rate_by_mode": {},
        "tokens_total": 0,
    }))
    .unwrap()
}

const INSTRUCTION_TABLE: &[(&str, &[&str])] = &[
    ("Cognitive", &["GENERATE", "DECOMPOSE", "REFLECT"]),
    ("Memory", &["LOAD", "STORE", "COMPRESS", "FILTER", "STRUCTURE", "RENDER"]),
    ("Execution", &["TOOL_CALL", "TOOL_BUILD", "DELEGATE", "RESPOND"]),
    ("Metacognitive", &["PREDICT_SUCCESS", "EVALUATE_PROGRESS", "MONITOR_RESOURCES"]),
    ("Normative", &["VERIFY", "CONSTRAIN", "FALLBACK", "INTERRUPT"]),
];

#[test]
fn foundational_instructions_classify_into_their_core() {
    let set = InstructionSet::foundational();
    for (core, names) in INSTRUCTION_TABLE {
        for name in *names {
            assert_eq!(set.classify_instruction(name).unwrap().core.name(), *core, "{name}");
        }
    }
    assert_eq!(set.iter().count(), INSTRUCTION_TABLE.iter().map(|(_, n)| n.len()).sum::<usize>());
}

/// Every runtime denial of a constraint rule on a transition that followed
/// a graph edge is an edge the adjacent linter reports.
#[test]
fn runtime_denials_on_edges_are_linted() {
    let mut checked = 0;
    for seed in 0..300 {
        let agent = agent(seed);
        let policy: &PolicySet = agent.constitution.policy("Executor").unwrap();
        if policy.semantics != Semantics::Adjacent {
            continue;
        }
        let lint = lint_constitution(&agent.constitution, policy);
        let outcome = run(&agent);
        for e in outcome.record.events() {
            for d in e.policy_decisions.iter().filter(|d| d.decision == Verdict::Deny && d.rule_id == "enforce_verify_before_action") {
                let edge = (e.node_id.clone(), d.target.clone());
                if !agent.constitution.graph().edges.iter().any(|g| (g.from.clone(), g.to.clone()) == edge) {
                    continue;
                }
                checked += 1;
                assert!(
                    lint.iter().any(|v| v.rule_id == d.rule_id
                        && v.location == Location::StaticEdge { from: edge.0.clone(), to: edge.1.clone() }),
                    "seed {seed}: denied {edge:?} not linted"
                );
            }
        }
    }
    assert!(checked > 10, "only {checked} denials exercised");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schema_validation_is_deterministic(value in arb_json(), which in 0usize..6) {
        let schema = parse_schema(&schema_docs()[which]);
        prop_assert_eq!(validate_schema(&value, &schema), validate_schema(&value, &schema));
    }

    #[test]
    fn binding_documents_round_trip(
        id in "[a-z][a-z0-9_]{0,10}",
        ty in prop::sample::select(INSTRUCTION_TABLE.iter().flat_map(|(_, n)| n.iter().copied()).collect::<Vec<_>>()),
        implementation in "[a-z]{1,8}(\\.[a-z]{1,8})?",
        input in 0usize..6,
        output in 0usize..6,
        async_check in any::<bool>(),
        redact in any::<bool>(),
    ) {
        let set = InstructionSet::foundational();
        let registry = SchemaRegistry::new();
        let docs = schema_docs();
        let doc = json!({"id": id, "type": ty, "implementation_ref": implementation,
                         "input_schema": docs[input], "output_schema": docs[output],
                         "async_check": async_check, "redact": redact});
        let binding = load_binding(&doc, &set, &registry).unwrap();
        let again = load_binding(&binding.to_document(), &set, &registry).unwrap();
        prop_assert_eq!(&again, &binding);
        prop_assert_eq!(again.to_document(), binding.to_document());
    }

    #[test]
    fn recorded_chains_verify_and_detect_tampering(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let outcome = run(&agent(seed));
        let record = &outcome.record;
        prop_assert!(record.verify_chain().is_ok());
        prop_assert!(FlightRecord::from_ndjson(&record.to_ndjson()).is_ok());
        let mut events = record.events().to_vec();
        let i = pick.index(events.len());
        events[i].output = json!({"tampered": true});
        match FlightRecord::from_parts(record.header().clone(), events) {
            Err(_) => prop_assert!(i + 1 < record.len(), "only the final link can survive an edit"),
            Ok(rebuilt) => prop_assert_ne!(rebuilt.chain_head(), record.chain_head()),
        }
    }

    #[test]
    fn materialized_states_match_recorded_hashes(seed in any::<u64>()) {
        let outcome = run(&agent(seed));
        let record = &outcome.record;
        for (k, e) in record.events().iter().enumerate() {
            prop_assert_eq!(materialize_at(record, k + 1).unwrap().hash(), e.state_hash.clone());
        }
        prop_assert_eq!(materialize_at(record, record.len()).unwrap(), outcome.state);
    }

    #[test]
    fn routing_is_deterministic(seed in any::<u64>(), kind in 0u8..3, memory in arb_json()) {
        let agent = agent(seed);
        let signal = match kind { 0 => Signal::pass(), 1 => Signal::fail("x"), _ => Signal::none() };
        let memory = memory.as_object().cloned().unwrap_or_default();
        for node in agent.constitution.graph().nodes.keys() {
            let a = agent.constitution.route(node, &signal, &memory);
            let b = agent.constitution.route(node, &signal, &memory);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn adding_a_rule_never_removes_a_violation(seed in any::<u64>(), taint in any::<bool>()) {
        let agent = agent(seed);
        let base = agent.constitution.policy("Executor").unwrap();
        let semantics = if taint { Semantics::Taint } else { Semantics::Adjacent };
        let narrow = PolicySet::new("Executor", base.rules[..1].to_vec(), semantics, base.tier).unwrap();
        let mut extra = base.rules[0].clone();
        extra.id = "no_memory_to_execution".into();
        extra.trigger.instruction_core = Some(CoreId::Metacognitive);
        let mut rules = base.rules.clone();
        rules.push(extra);
        let wide = PolicySet::new("Executor", rules, semantics, base.tier).unwrap();
        let before = lint_constitution(&agent.constitution, &narrow);
        let after = lint_constitution(&agent.constitution, &wide);
        for v in &before {
            prop_assert!(after.contains(v));
        }
        prop_assert_eq!(before.clone(), lint_constitution(&agent.constitution, &narrow));
    }

    #[test]
    fn ensemble_is_permutation_invariant_and_monotone_in_k(
        votes in prop::collection::vec(0u8..3, 1..8),
        shuffled in any::<prop::sample::Index>(),
    ) {
        let signals: Vec<Signal> = votes.iter().map(|v| match v { 0 => Signal::pass(), 1 => Signal::fail("no"), _ => Signal::none() }).collect();
        let mut rotated = signals.clone();
        rotated.rotate_left(shuffled.index(signals.len()));
        rotated.reverse();
        let mut passing = true;
        for k in 1..=signals.len() {
            let a = combine_ensemble(&signals, k).unwrap();
            prop_assert_eq!(&a, &combine_ensemble(&rotated, k).unwrap());
            let passes = votes.iter().filter(|v| **v == 0).count();
            prop_assert_eq!(a.signal.kind == SignalKind::Pass, passes >= k);
            prop_assert!(passing || a.signal.kind == SignalKind::Fail);
            passing = a.signal.kind == SignalKind::Pass;
        }
    }

    #[test]
    fn nonconforming_judges_never_pass(output in arb_json()) {
        let conforms = output.get("verdict").is_some_and(|v| v == "PASS" || v == "FAIL")
            && output.get("confidence").and_then(Value::as_f64).is_some_and(|p| (0.0..=1.0).contains(&p))
            && output.get("reasoning").is_some_and(Value::is_string);
        let signal = interpret_judge(&Ok(BackendResponse::new(output.clone())));
        if !conforms {
            prop_assert_eq!(signal.kind, SignalKind::Fail);
        }
    }

    #[test]
    fn adding_a_passing_case_never_blocks_a_passing_gate(
        cases in prop::collection::btree_map("[a-f]{1,3}", any::<bool>(), 0..10),
        baselined in prop::collection::btree_map("[a-f]{1,3}", any::<bool>(), 0..10),
        extra in "[g-h]{1,2}",
        extra_baseline in prop::option::of(any::<bool>()),
        drop in prop::sample::select(vec![0.0, 0.05, 0.1, 0.25]),
        forbid in any::<bool>(),
    ) {
        let mut baseline_cases: BTreeMap<String, bool> = baselined;
        if let Some(was) = extra_baseline {
            baseline_cases.insert(extra.clone(), was);
        }
        let baseline = Baseline { constitution_hash: "c".into(), cases: baseline_cases, pass_rate: Default::default() };
        let thresholds = GateThresholds { max_pass_rate_drop: drop, newly_failing_forbidden: forbid };
        let list: Vec<(String, bool)> = cases.into_iter().collect();
        let before = gate_regression(&report(&list), Some(&baseline), &thresholds);
        let mut grown = list.clone();
        grown.push((extra, true));
        let after = gate_regression(&report(&grown), Some(&baseline), &thresholds);
        if before.decision == GateDecision::Pass {
            prop_assert_eq!(after.decision, GateDecision::Pass);
        }
    }
}

#[test]
fn fallback_routes_are_recorded_as_such() {
    let mut fallbacks = 0;
    for seed in 0..100 {
        let agent = agent(seed);
        let outcome = run(&agent);
        for e in outcome.record.events() {
            if let RoutingDecision::Fallback { node } = &e.routing {
                assert_eq!(agent.constitution.graph().fallbacks.get(&e.node_id), Some(node));
                fallbacks += 1;
            }
        }
    }
    assert!(fallbacks > 0);
}
