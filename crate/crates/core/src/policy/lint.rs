use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{Location, PolicySet, RuleFamily, Semantics, Trigger, Violation};
use crate::acf::CoreId;
use crate::graph::Constitution;

/// Node classification plus deduplicated directed edges: the part of a
/// constitution static analysis looks at.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgeList {
    pub nodes: BTreeMap<String, (CoreId, String)>,
    pub edges: BTreeSet<(String, String)>,
}

impl EdgeList {
    pub fn from_constitution(c: &Constitution) -> Self {
        let mut nodes = BTreeMap::new();
        for (id, node) in &c.graph().nodes {
            if let Some(b) = c.binding(&node.binding_id) {
                nodes.insert(id.clone(), (b.instruction_type.core.clone(), b.instruction_type.name.clone()));
            }
        }
        let edges = c.graph().edges.iter().map(|e| (e.from.clone(), e.to.clone())).collect();
        EdgeList { nodes, edges }
    }

    pub fn successors(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (a, b) in &self.edges {
            out.entry(a.as_str()).or_default().push(b.as_str());
        }
        out
    }

    fn core_of(&self, n: &str) -> Option<&CoreId> {
        self.nodes.get(n).map(|(c, _)| c)
    }
}

/// Pairs (source, target) such that some path from a trigger-matching
/// source reaches a target of core `target` without passing through a node
/// of core `barrier`.
pub fn taint_findings(
    graph: &EdgeList,
    trigger: &Trigger,
    target: &CoreId,
    barrier: Option<&CoreId>,
) -> BTreeSet<(String, String)> {
    let succ = graph.successors();
    let is_barrier = |n: &str| barrier.is_some_and(|b| graph.core_of(n) == Some(b));
    let mut found = BTreeSet::new();
    for (source, (core, ty)) in &graph.nodes {
        if !trigger.matches(core, ty) {
            continue;
        }
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&str> = VecDeque::new();
        let visit = |n: &str, seen: &mut BTreeSet<String>, found: &mut BTreeSet<(String, String)>| {
            if graph.core_of(n) == Some(target) {
                found.insert((source.clone(), n.to_string()));
            }
            !is_barrier(n) && seen.insert(n.to_string())
        };
        for &n in succ.get(source.as_str()).into_iter().flatten() {
            if visit(n, &mut seen, &mut found) {
                queue.push_back(n);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &n in succ.get(u).into_iter().flatten() {
                if visit(n, &mut seen, &mut found) {
                    queue.push_back(n);
                }
            }
        }
    }
    found
}

fn adjacent_findings(graph: &EdgeList, trigger: &Trigger, target: &CoreId) -> BTreeSet<(String, String)> {
    graph
        .edges
        .iter()
        .filter(|(a, b)| {
            let src = graph.nodes.get(a);
            let dst = graph.core_of(b);
            src.is_some_and(|(c, t)| trigger.matches(c, t)) && dst == Some(target)
        })
        .cloned()
        .collect()
}

pub(crate) fn lint_edges(graph: &EdgeList, policy: &PolicySet) -> Vec<Violation> {
    let mut out = Vec::new();
    for rule in &policy.rules {
        let RuleFamily::Constraint { violates_if_followed_by, must_precede } = &rule.family else { continue };
        let pairs = match policy.semantics {
            Semantics::Adjacent => adjacent_findings(graph, &rule.trigger, violates_if_followed_by),
            Semantics::Taint => taint_findings(graph, &rule.trigger, violates_if_followed_by, must_precede.as_ref()),
        };
        for (from, to) in pairs {
            let message = match policy.semantics {
                Semantics::Adjacent => format!("{} (edge {from} -> {to})", rule.description),
                Semantics::Taint => format!("{} (unchecked path {from} ~> {to})", rule.description),
            };
            out.push(Violation {
                rule_id: rule.id.clone(),
                location: Location::StaticEdge { from, to },
                message,
                severity: rule.severity(policy.tier),
            });
        }
    }
    out.sort_by(|a, b| {
        let key = |v: &Violation| match &v.location {
            Location::StaticEdge { from, to } => (v.rule_id.clone(), from.clone(), to.clone()),
            Location::RuntimeStep { seq } => (v.rule_id.clone(), seq.to_string(), String::new()),
        };
        key(a).cmp(&key(b))
    });
    out
}

/// Static check of every graph edge (or path, under taint semantics)
/// against the constraint rules of `policy`, ordered by (rule, from, to).
pub fn lint_constitution(constitution: &Constitution, policy: &PolicySet) -> Vec<Violation> {
    lint_edges(&EdgeList::from_constitution(constitution), policy)
}
