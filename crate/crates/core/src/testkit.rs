//! Seeded generators for property tests and acceptance runs: small random
//! constitutions with matching scripted fixtures, malformed model outputs
//! and a budget-burning loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

use crate::graph::{Constitution, ConstitutionParts, PackageError};
use crate::hal::{parse_fixture, ScriptedBackend};

/// A generated package plus a fixture and input that exercise it.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    pub constitution: Constitution,
    pub fixture: Value,
    pub input: Value,
    pub max_steps: u64,
}

impl RandomAgent {
    /// A fresh backend over the fixture, with all cursors at the start.
    pub fn backend(&self) -> ScriptedBackend {
        parse_fixture(&self.fixture).expect("generated fixtures parse")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Generate,
    Verify,
    ToolCall,
    Fallback,
    Monitor,
    Evaluate,
    Respond,
}

impl Kind {
    const NON_TERMINAL: [Kind; 6] = [Kind::Generate, Kind::Verify, Kind::ToolCall, Kind::Fallback, Kind::Monitor, Kind::Evaluate];

    fn instruction(self) -> &'static str {
        match self {
            Kind::Generate => "GENERATE",
            Kind::Verify => "VERIFY",
            Kind::ToolCall => "TOOL_CALL",
            Kind::Fallback => "FALLBACK",
            Kind::Monitor => "MONITOR_RESOURCES",
            Kind::Evaluate => "EVALUATE_PROGRESS",
            Kind::Respond => "RESPOND",
        }
    }

    fn calls_backend(self) -> bool {
        matches!(self, Kind::Generate | Kind::ToolCall | Kind::Fallback | Kind::Evaluate)
    }

    fn binding(self, id: &str) -> Value {
        let (implementation, input, output) = match self {
            Kind::Generate => ("model", json!("any"), json!({"text": "string", "score": "number?"})),
            Kind::Verify => (
                "nonempty:text",
                json!("any"),
                json!({"result": {"type": "enum", "values": ["PASS", "FAIL"]}, "error_message": {"type": "string", "nullable": true}}),
            ),
            Kind::ToolCall => ("search", json!({"text": "string?"}), json!({"text": "string"})),
            Kind::Fallback => ("cache", json!({"text": "string?"}), json!({"text": "string"})),
            Kind::Monitor => ("kernel.resources", json!("any"), json!("any")),
            Kind::Evaluate => ("progress", json!("any"), json!({"is_productive": "boolean", "reasoning": "string?"})),
            Kind::Respond => ("reply", json!("any"), json!("any")),
        };
        json!({
            "id": id,
            "type": self.instruction(),
            "implementation_ref": implementation,
            "input_schema": input,
            "output_schema": output,
        })
    }

    fn good_output(self, rng: &mut impl Rng) -> Value {
        match self {
            Kind::Evaluate => json!({"is_productive": rng.gen_bool(0.6), "reasoning": "checked"}),
            Kind::Generate if rng.gen_bool(0.5) => json!({"text": word(rng), "score": rng.gen_range(0..100)}),
            Kind::Generate | Kind::ToolCall | Kind::Fallback => {
                json!({"text": if rng.gen_bool(0.15) { String::new() } else { word(rng) }})
            }
            _ => json!({}),
        }
    }
}

fn word(rng: &mut impl Rng) -> String {
    const WORDS: &[&str] = &["alpha", "ledger", "orbit", "quartz", "harbor", "signal", "meadow", "vector"];
    WORDS.choose(rng).expect("nonempty").to_string()
}

fn fixture_item(kind: Kind, rng: &mut impl Rng) -> Value {
    let roll = rng.gen_range(0..10);
    let mut item = Map::new();
    match roll {
        0 => {
            item.insert("error".into(), json!(if rng.gen_bool(0.5) { "tool" } else { "transport" }));
            item.insert("message".into(), json!("injected"));
        }
        1 => {
            item.insert("output".into(), malformed_output(rng));
        }
        _ => {
            item.insert("output".into(), kind.good_output(rng));
        }
    }
    if kind == Kind::Generate || kind == Kind::Evaluate {
        item.insert("tokens".into(), json!(rng.gen_range(0..40)));
    }
    if rng.gen_bool(0.2) {
        item.insert("confidence".into(), json!(rng.gen_range(50..=100) as f64 / 100.0));
    }
    Value::Object(item)
}

/// A random package of at most `max_nodes` nodes that loads cleanly.
///
/// Nodes are numbered in a forward order; every non-terminal node has an
/// unconditional edge to a later node, so a RESPOND node is always
/// reachable. Guarded edges and fallbacks may point anywhere and create
/// cycles, which the step limit bounds.
pub fn random_agent(rng: &mut impl Rng, max_nodes: usize) -> RandomAgent {
    loop {
        if let Ok(agent) = try_random_agent(rng, max_nodes) {
            return agent;
        }
    }
}

fn try_random_agent(rng: &mut impl Rng, max_nodes: usize) -> Result<RandomAgent, PackageError> {
    let n = rng.gen_range(2..=max_nodes.max(2));
    let mut kinds: Vec<Kind> = (0..n - 1).map(|_| *Kind::NON_TERMINAL.choose(rng).expect("nonempty")).collect();
    kinds.push(Kind::Respond);
    for k in kinds.iter_mut().skip(1).take(n - 2) {
        if rng.gen_bool(0.15) {
            *k = Kind::Respond;
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let fallback_nodes: Vec<usize> = (0..n).filter(|&i| kinds[i] == Kind::Fallback).collect();

    let mut nodes = Map::new();
    let mut edges = Vec::new();
    let mut fallbacks = Map::new();
    for i in 0..n {
        let replan = i == 0 && rng.gen_bool(0.5);
        nodes.insert(ids[i].clone(), if replan { json!({"binding": ids[i], "replan": true}) } else { json!(ids[i]) });
        if kinds[i] == Kind::Respond {
            continue;
        }
        let forward = rng.gen_range(i + 1..n);
        edges.push(json!({"from": ids[i], "to": ids[forward]}));
        for guard in ["on_pass", "on_fail"] {
            if rng.gen_bool(0.35) {
                edges.push(json!({"from": ids[i], "to": ids[rng.gen_range(0..n)], "guard": guard}));
            }
        }
        if rng.gen_bool(0.15) {
            edges.push(json!({"from": ids[i], "to": ids[rng.gen_range(0..n)], "guard": {"key": "text", "equals": word(rng)}}));
        }
        if matches!(kinds[i], Kind::ToolCall | Kind::Verify) && rng.gen_bool(0.5) {
            if let Some(&f) = fallback_nodes.choose(rng) {
                if f != i {
                    fallbacks.insert(ids[i].clone(), json!(ids[f]));
                }
            }
        }
    }

    let semantics = if rng.gen_bool(0.5) { "adjacent" } else { "taint" };
    let mut rules = vec![json!({
        "id": "enforce_verify_before_action",
        "description": "Cognitive outputs must be verified before external execution.",
        "trigger": {"instruction_core": "Cognitive"},
        "constraint": {"violates_if_followed_by_instruction_core": "Execution", "must_precede_core": "Normative"},
    })];
    if rng.gen_bool(0.3) {
        rules.push(json!({"id": "pace_tools", "temporal": {"instruction_type": "TOOL_CALL", "min_interval_steps": 2}}));
    }
    let tier = *["development", "staging", "production"].choose(rng).expect("nonempty");

    let parts = ConstitutionParts {
        graph: json!({"environment": "Executor", "entry": "n0", "nodes": nodes, "edges": edges, "fallbacks": fallbacks}),
        bindings: (0..n).map(|i| kinds[i].binding(&ids[i])).collect(),
        policies: vec![json!({"environment": "Executor", "semantics": semantics, "tier": tier, "rules": rules})],
        ..Default::default()
    };
    let constitution = Constitution::assemble(parts)?;

    let mut responses = Map::new();
    for i in 0..n {
        if kinds[i].calls_backend() {
            let items: Vec<Value> = (0..rng.gen_range(1..=4)).map(|_| fixture_item(kinds[i], rng)).collect();
            responses.insert(ids[i].clone(), json!({"items": items, "cycle": true}));
        }
    }
    Ok(RandomAgent {
        constitution,
        fixture: json!({"responses": responses}),
        input: json!({"text": word(rng)}),
        max_steps: rng.gen_range(4..=30),
    })
}

/// A value that cannot conform to a record schema whose only required field
/// is `text: string`: wrong top-level shape, missing field, or wrong type.
pub fn malformed_output(rng: &mut impl Rng) -> Value {
    match rng.gen_range(0..9) {
        0 => Value::Null,
        1 => json!(word(rng)),
        2 => json!(rng.gen_range(-1000..1000)),
        3 => json!([word(rng), word(rng)]),
        4 => json!(rng.gen_bool(0.5)),
        5 => json!({}),
        6 => json!({"summary": word(rng)}),
        7 => json!({"text": rng.gen_range(0..100)}),
        _ => json!({"text": [word(rng)]}),
    }
}

/// A GENERATE node that feeds itself until memory says `done`, with a
/// RESPOND exit that the scripted model never takes.
pub fn generate_loop() -> Constitution {
    let parts = ConstitutionParts {
        graph: json!({
            "environment": "Executor",
            "entry": "think",
            "nodes": {"think": "think", "answer": "answer"},
            "edges": [
                {"from": "think", "to": "answer", "guard": {"key": "done", "equals": true}},
                {"from": "think", "to": "think"},
            ],
        }),
        bindings: vec![
            json!({"id": "think", "type": "GENERATE", "implementation_ref": "model", "input_schema": "any",
                   "output_schema": {"thought": "string", "done": "boolean"}}),
            json!({"id": "answer", "type": "RESPOND", "implementation_ref": "reply", "input_schema": "any", "output_schema": "any"}),
        ],
        policies: vec![json!({"environment": "Executor", "rules": []})],
        ..Default::default()
    };
    Constitution::assemble(parts).expect("loop package is well formed")
}

/// Scripted model for [`generate_loop`] spending `tokens` per step forever.
pub fn loop_fixture(tokens: u64) -> Value {
    json!({"responses": {"think": {"items": [{"output": {"thought": "again", "done": false}, "tokens": tokens}], "cycle": true}}})
}

/// A single GENERATE step with a typed output, then a reply whichever way
/// the step went. Feeding it a malformed output exercises the firewall.
pub fn firewall_probe() -> Constitution {
    let parts = ConstitutionParts {
        graph: json!({
            "environment": "Executor",
            "entry": "draft",
            "nodes": {"draft": "draft", "reply": "reply"},
            "edges": [{"from": "draft", "to": "reply"}],
        }),
        bindings: vec![
            json!({"id": "draft", "type": "GENERATE", "implementation_ref": "model", "input_schema": {"topic": "string"},
                   "output_schema": {"text": "string", "score": "number?"}}),
            json!({"id": "reply", "type": "RESPOND", "implementation_ref": "reply", "input_schema": "any", "output_schema": "any"}),
        ],
        policies: vec![json!({"environment": "Executor", "rules": []})],
        ..Default::default()
    };
    Constitution::assemble(parts).expect("probe package is well formed")
}
