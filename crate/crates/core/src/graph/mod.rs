//! Execution graphs, structural checks, successor routing and constitution
//! packages.

mod package;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::acf::{CoreId, InstructionBinding, TrustClass};
use crate::canonical::canonical_json;
use crate::state::{Signal, SignalKind};

pub use package::{load_constitution, Constitution, ConstitutionParts, PackageError, ToolSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Guard {
    Always,
    OnPass,
    OnFail,
    OnKey { key: String, equals: Value },
}

impl Guard {
    fn from_document(doc: Option<&Value>) -> Result<Guard, String> {
        match doc {
            None | Some(Value::Null) => Ok(Guard::Always),
            Some(Value::String(s)) => match s.as_str() {
                "always" => Ok(Guard::Always),
                "on_pass" => Ok(Guard::OnPass),
                "on_fail" => Ok(Guard::OnFail),
                other => Err(format!("unknown guard `{other}`")),
            },
            Some(Value::Object(m)) => {
                let key = m.get("key").and_then(Value::as_str).ok_or("key guard needs `key`")?;
                let equals = m.get("equals").ok_or("key guard needs `equals`")?;
                if m.len() != 2 {
                    return Err("key guard takes only `key` and `equals`".into());
                }
                Ok(Guard::OnKey { key: key.to_string(), equals: equals.clone() })
            }
            Some(other) => Err(format!("malformed guard {other}")),
        }
    }

    fn to_document(&self) -> Value {
        match self {
            Guard::Always => Value::from("always"),
            Guard::OnPass => Value::from("on_pass"),
            Guard::OnFail => Value::from("on_fail"),
            Guard::OnKey { key, equals } => serde_json::json!({"key": key, "equals": equals}),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub guard: Guard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSpec {
    pub binding_id: String,
    pub replan: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionGraph {
    pub entry: String,
    pub nodes: BTreeMap<String, NodeSpec>,
    pub edges: Vec<Edge>,
    pub fallbacks: BTreeMap<String, String>,
    pub open_ended: bool,
}

/// Keys accepted at the top level of a graph document besides the graph
/// itself.
pub(crate) const GRAPH_META_KEYS: &[&str] = &["environment", "custom_cores", "description"];

impl ExecutionGraph {
    pub fn from_document(doc: &Value) -> Result<ExecutionGraph, String> {
        let map = doc.as_object().ok_or("graph must be a mapping")?;
        const KEYS: &[&str] = &["entry", "nodes", "edges", "fallbacks", "open_ended"];
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str()) && !GRAPH_META_KEYS.contains(&k.as_str())) {
            return Err(format!("unknown graph key `{k}`"));
        }
        let entry = map.get("entry").and_then(Value::as_str).ok_or("graph needs `entry`")?.to_string();
        let mut nodes = BTreeMap::new();
        for (id, spec) in map.get("nodes").and_then(Value::as_object).ok_or("graph needs `nodes` mapping")? {
            let node = match spec {
                Value::String(b) => NodeSpec { binding_id: b.clone(), replan: false },
                Value::Object(m) => {
                    if let Some(k) = m.keys().find(|k| *k != "binding" && *k != "replan") {
                        return Err(format!("node `{id}`: unknown key `{k}`"));
                    }
                    NodeSpec {
                        binding_id: m
                            .get("binding")
                            .and_then(Value::as_str)
                            .ok_or_else(|| format!("node `{id}` needs `binding`"))?
                            .to_string(),
                        replan: m.get("replan").and_then(Value::as_bool).unwrap_or(false),
                    }
                }
                _ => return Err(format!("node `{id}` must name a binding")),
            };
            nodes.insert(id.clone(), node);
        }
        let mut edges = Vec::new();
        for e in map.get("edges").and_then(Value::as_array).map(Vec::as_slice).unwrap_or_default() {
            let m = e.as_object().ok_or("edge must be a mapping")?;
            if let Some(k) = m.keys().find(|k| !["from", "to", "guard"].contains(&k.as_str())) {
                return Err(format!("edge: unknown key `{k}`"));
            }
            let end = |k: &str| m.get(k).and_then(Value::as_str).map(str::to_string).ok_or(format!("edge needs `{k}`"));
            edges.push(Edge { from: end("from")?, to: end("to")?, guard: Guard::from_document(m.get("guard"))? });
        }
        let mut fallbacks = BTreeMap::new();
        if let Some(fb) = map.get("fallbacks") {
            for (k, v) in fb.as_object().ok_or("`fallbacks` must be a mapping")? {
                fallbacks.insert(k.clone(), v.as_str().ok_or("fallback target must be a node id")?.to_string());
            }
        }
        let open_ended = map.get("open_ended").and_then(Value::as_bool).unwrap_or(false);
        Ok(ExecutionGraph { entry, nodes, edges, fallbacks, open_ended })
    }

    pub fn to_document(&self) -> Value {
        let nodes: Map<String, Value> = self
            .nodes
            .iter()
            .map(|(id, n)| {
                let v = if n.replan {
                    serde_json::json!({"binding": n.binding_id, "replan": true})
                } else {
                    Value::from(n.binding_id.clone())
                };
                (id.clone(), v)
            })
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| serde_json::json!({"from": e.from, "to": e.to, "guard": e.guard.to_document()}))
            .collect();
        serde_json::json!({
            "entry": self.entry,
            "nodes": nodes,
            "edges": edges,
            "fallbacks": self.fallbacks,
            "open_ended": self.open_ended,
        })
    }

    pub fn outgoing<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from == node)
    }

    /// Lexicographically first node tagged `replan`.
    pub fn replan_target(&self) -> Option<&str> {
        self.nodes.iter().find(|(_, n)| n.replan).map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    MissingEntry,
    DanglingBinding,
    DanglingEdge,
    DanglingFallback,
    AmbiguousGuards,
    NoTerminal,
    Unreachable,
    UnhandledFailure,
    FallbackChain,
}

impl FindingKind {
    /// Findings that make a package unloadable.
    pub fn is_error(self) -> bool {
        !matches!(self, FindingKind::Unreachable | FindingKind::UnhandledFailure | FindingKind::FallbackChain)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub node: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct StructureReport {
    pub findings: Vec<Finding>,
}

impl StructureReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.kind.is_error())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| !f.kind.is_error())
    }

    fn push(&mut self, kind: FindingKind, node: Option<&str>, message: String) {
        self.findings.push(Finding { kind, node: node.map(str::to_string), message });
    }
}

const FAIL_PRONE: &[&str] = &["TOOL_CALL", "VERIFY"];

/// Structural review: dangling references, ambiguous guards, reachability,
/// unhandled failure paths and deep fallback chains. Never fails.
pub fn validate_graph(graph: &ExecutionGraph, bindings: &BTreeMap<String, InstructionBinding>) -> StructureReport {
    let mut report = StructureReport::default();
    if !graph.nodes.contains_key(&graph.entry) {
        report.push(FindingKind::MissingEntry, Some(&graph.entry), format!("entry `{}` is not a node", graph.entry));
    }
    for (id, node) in &graph.nodes {
        if !bindings.contains_key(&node.binding_id) {
            report.push(FindingKind::DanglingBinding, Some(id), format!("node `{id}` names unknown binding `{}`", node.binding_id));
        }
    }
    for e in &graph.edges {
        for end in [&e.from, &e.to] {
            if !graph.nodes.contains_key(end) {
                report.push(FindingKind::DanglingEdge, Some(end), format!("dangling edge {} -> {}", e.from, e.to));
            }
        }
    }
    for (from, to) in &graph.fallbacks {
        if !graph.nodes.contains_key(from) || !graph.nodes.contains_key(to) {
            report.push(FindingKind::DanglingFallback, Some(from), format!("dangling fallback {from} -> {to}"));
        }
    }
    for id in graph.nodes.keys() {
        let out: Vec<&Edge> = graph.outgoing(id).collect();
        let count = |g: &Guard| out.iter().filter(|e| &e.guard == g).count();
        for (g, name) in [(Guard::Always, "always"), (Guard::OnPass, "on_pass"), (Guard::OnFail, "on_fail")] {
            if count(&g) > 1 {
                report.push(FindingKind::AmbiguousGuards, Some(id), format!("node `{id}` has more than one {name} edge"));
            }
        }
        let mut keys = BTreeSet::new();
        for e in &out {
            if let Guard::OnKey { key, equals } = &e.guard {
                if !keys.insert((key.clone(), canonical_json(equals))) {
                    report.push(FindingKind::AmbiguousGuards, Some(id), format!("node `{id}` repeats guard {key} = {equals}"));
                }
            }
        }
    }

    let binding_of = |n: &str| graph.nodes.get(n).and_then(|s| bindings.get(&s.binding_id));
    let reachable = reachable_nodes(graph, bindings);
    for id in graph.nodes.keys().filter(|n| !reachable.contains(n.as_str())) {
        report.push(FindingKind::Unreachable, Some(id), format!("node `{id}` is unreachable from entry"));
    }
    let terminal_reachable = reachable
        .iter()
        .any(|n| binding_of(n).is_some_and(|b| b.instruction_type.trust == TrustClass::Terminal));
    if !terminal_reachable && !graph.open_ended && graph.nodes.contains_key(&graph.entry) {
        report.push(FindingKind::NoTerminal, None, "no terminal node is reachable from entry and the graph is not open_ended".into());
    }
    for id in graph.nodes.keys() {
        let Some(b) = binding_of(id) else { continue };
        if FAIL_PRONE.contains(&b.instruction_type.name.as_str())
            && !graph.fallbacks.contains_key(id)
            && !graph.outgoing(id).any(|e| e.guard == Guard::OnFail)
        {
            report.push(FindingKind::UnhandledFailure, Some(id), format!("unhandled failure path at `{id}` ({})", b.instruction_type.name));
        }
    }
    for start in graph.fallbacks.keys() {
        let mut hops = 0;
        let mut seen = BTreeSet::from([start.as_str()]);
        let mut cur = start.as_str();
        while let Some(next) = graph.fallbacks.get(cur) {
            hops += 1;
            if !seen.insert(next.as_str()) {
                report.push(FindingKind::FallbackChain, Some(start), format!("fallback chain from `{start}` loops"));
                break;
            }
            if hops > 2 {
                report.push(FindingKind::FallbackChain, Some(start), format!("fallback chain from `{start}` is deeper than one level"));
                break;
            }
            cur = next;
        }
    }
    report
}

/// Nodes reachable from entry through edges, fallbacks and (from
/// Metacognitive nodes) the replan target.
pub(crate) fn reachable_nodes<'a>(
    graph: &'a ExecutionGraph,
    bindings: &BTreeMap<String, InstructionBinding>,
) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::new();
    let Some((entry, _)) = graph.nodes.get_key_value(&graph.entry) else { return seen };
    let mut queue = VecDeque::from([entry.as_str()]);
    seen.insert(entry.as_str());
    while let Some(n) = queue.pop_front() {
        let mut next: Vec<&str> = graph.outgoing(n).map(|e| e.to.as_str()).collect();
        next.extend(graph.fallbacks.get(n).map(String::as_str));
        let meta = graph
            .nodes
            .get(n)
            .and_then(|s| bindings.get(&s.binding_id))
            .is_some_and(|b| b.instruction_type.core == CoreId::Metacognitive);
        if meta {
            next.extend(graph.replan_target());
        }
        for m in next {
            if let Some((k, _)) = graph.nodes.get_key_value(m) {
                if seen.insert(k.as_str()) {
                    queue.push_back(k.as_str());
                }
            }
        }
    }
    seen
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Successor {
    Node(String),
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("no route from `{0}`")]
    NoRoute(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

/// Picks the successor of `node_id`: key guards in (key, value) order, then
/// the guard for the signal, then the unconditional edge.
pub fn route_successor(
    graph: &ExecutionGraph,
    node_id: &str,
    signal: &Signal,
    user_memory: &Map<String, Value>,
    terminal_trust: bool,
) -> Result<Successor, RouteError> {
    if !graph.nodes.contains_key(node_id) {
        return Err(RouteError::UnknownNode(node_id.to_string()));
    }
    let out: Vec<&Edge> = graph.outgoing(node_id).collect();
    let mut keyed: Vec<(&str, String, &Edge)> = out
        .iter()
        .filter_map(|e| match &e.guard {
            Guard::OnKey { key, equals } => Some((key.as_str(), canonical_json(equals), *e)),
            _ => None,
        })
        .collect();
    keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    for (key, _, edge) in keyed {
        if let Guard::OnKey { equals, .. } = &edge.guard {
            if user_memory.get(key) == Some(equals) {
                return Ok(Successor::Node(edge.to.clone()));
            }
        }
    }
    let wanted = match signal.kind {
        SignalKind::Pass => Some(Guard::OnPass),
        SignalKind::Fail => Some(Guard::OnFail),
        SignalKind::None => None,
    };
    if let Some(g) = wanted {
        if let Some(e) = out.iter().find(|e| e.guard == g) {
            return Ok(Successor::Node(e.to.clone()));
        }
    }
    if let Some(e) = out.iter().find(|e| e.guard == Guard::Always) {
        return Ok(Successor::Node(e.to.clone()));
    }
    if terminal_trust || (graph.open_ended && out.is_empty()) {
        return Ok(Successor::Terminal);
    }
    Err(RouteError::NoRoute(node_id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn g(doc: Value) -> ExecutionGraph {
        ExecutionGraph::from_document(&doc).unwrap()
    }

    fn table9() -> ExecutionGraph {
        g(json!({
            "entry": "fetch",
            "nodes": {"fetch": "get_sales_data", "verify_api_response": "verify_api_response",
                      "get_cached_sales_data": "get_cached_sales_data", "compile_report": "compile_report"},
            "edges": [
                {"from": "fetch", "to": "verify_api_response"},
                {"from": "verify_api_response", "to": "compile_report", "guard": "on_pass"},
                {"from": "get_cached_sales_data", "to": "verify_api_response"}
            ],
            "fallbacks": {"fetch": "get_cached_sales_data", "verify_api_response": "get_cached_sales_data"}
        }))
    }

    #[test]
    fn signal_guards_route() {
        let graph = table9();
        let mem = Map::new();
        assert_eq!(
            route_successor(&graph, "verify_api_response", &Signal::pass(), &mem, false),
            Ok(Successor::Node("compile_report".into()))
        );
        assert_eq!(
            route_successor(&graph, "verify_api_response", &Signal::fail("x"), &mem, false),
            Err(RouteError::NoRoute("verify_api_response".into()))
        );
        for s in [Signal::pass(), Signal::fail("x"), Signal::none()] {
            assert_eq!(route_successor(&graph, "fetch", &s, &mem, false), Ok(Successor::Node("verify_api_response".into())));
        }
        assert_eq!(route_successor(&graph, "compile_report", &Signal::none(), &mem, true), Ok(Successor::Terminal));
    }

    #[test]
    fn key_guards_take_precedence_in_key_order() {
        let graph = g(json!({
            "entry": "a",
            "nodes": {"a": "x", "b": "x", "c": "x", "d": "x"},
            "edges": [
                {"from": "a", "to": "d"},
                {"from": "a", "to": "c", "guard": {"key": "mode", "equals": "fast"}},
                {"from": "a", "to": "b", "guard": {"key": "flag", "equals": true}}
            ]
        }));
        let mem: Map<String, Value> = json!({"mode": "fast", "flag": true}).as_object().unwrap().clone();
        assert_eq!(route_successor(&graph, "a", &Signal::pass(), &mem, false), Ok(Successor::Node("b".into())));
        let mem: Map<String, Value> = json!({"mode": "fast"}).as_object().unwrap().clone();
        assert_eq!(route_successor(&graph, "a", &Signal::pass(), &mem, false), Ok(Successor::Node("c".into())));
        assert_eq!(route_successor(&graph, "a", &Signal::none(), &Map::new(), false), Ok(Successor::Node("d".into())));
    }

    #[test]
    fn document_round_trip() {
        let graph = table9();
        assert_eq!(ExecutionGraph::from_document(&graph.to_document()).unwrap(), graph);
        assert!(ExecutionGraph::from_document(&json!({"entry": "a", "nodes": {}, "colour": 1})).is_err());
    }
}
