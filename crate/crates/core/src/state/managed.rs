use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::trace::{EscalationOutcome, EventKind, InterruptTicket, RoutingDecision, TraceEvent, REDACTED_KEY};
use super::StateError;
use crate::acf::CoreId;
use crate::canonical::{digest_of, merge_into};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SignalKind {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
    #[default]
    #[serde(rename = "NONE")]
    None,
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignalKind::Pass => "PASS",
            SignalKind::Fail => "FAIL",
            SignalKind::None => "NONE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Signal {
    pub kind: SignalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Signal {
    pub fn none() -> Self {
        Signal::default()
    }

    pub fn pass() -> Self {
        Signal { kind: SignalKind::Pass, ..Signal::default() }
    }

    pub fn fail(reason: impl Into<String>) -> Self {
        Signal { kind: SignalKind::Fail, confidence: None, reason: Some(reason.into()) }
    }

    pub fn from_bool(pass: bool) -> Self {
        if pass {
            Signal::pass()
        } else {
            Signal { kind: SignalKind::Fail, ..Signal::default() }
        }
    }

    pub fn with_confidence(mut self, p: f64) -> Self {
        self.confidence = Some(p);
        self
    }

    pub fn with_reason(mut self, reason: impl Into<String>) -> Self {
        self.reason = Some(reason.into());
        self
    }

    pub fn is_fail(&self) -> bool {
        self.kind == SignalKind::Fail
    }

    pub fn is_pass(&self) -> bool {
        self.kind == SignalKind::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceCounters {
    pub tokens_used: u64,
    pub steps_used: u64,
    pub cost_units: f64,
}

impl ResourceCounters {
    pub fn add(&mut self, delta: &ResourceCounters) {
        self.tokens_used += delta.tokens_used;
        self.steps_used += delta.steps_used;
        self.cost_units += delta.cost_units;
    }
}

/// Configured hard limits. Counters at or above a limit exhaust the budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_tokens: u64,
    pub max_steps: u64,
    pub max_cost_units: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_tokens: 100_000, max_steps: 100, max_cost_units: 1_000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    #[default]
    Running,
    Interrupted,
    Halted,
}

/// The most recently executed step, as seen by transition checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepContext {
    pub node_id: String,
    pub binding_id: String,
    pub instruction_type: String,
    pub core: CoreId,
    pub step: u64,
}

/// Kernel-owned half of the state. Readable by anyone, writable only inside
/// this crate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OsMetadata {
    pub(crate) step_seq: u64,
    pub(crate) last_signal: Signal,
    pub(crate) last_confidence: Option<f64>,
    pub(crate) resources: ResourceCounters,
    pub(crate) taint: BTreeMap<String, bool>,
    pub(crate) environment: String,
    pub(crate) status: RunStatus,
    pub(crate) pending_interrupt: Option<InterruptTicket>,
    pub(crate) last_step: Option<StepContext>,
    pub(crate) last_step_of_type: BTreeMap<String, u64>,
}

impl OsMetadata {
    pub fn step_seq(&self) -> u64 {
        self.step_seq
    }
    pub fn last_signal(&self) -> &Signal {
        &self.last_signal
    }
    pub fn last_confidence(&self) -> Option<f64> {
        self.last_confidence
    }
    pub fn resources(&self) -> &ResourceCounters {
        &self.resources
    }
    pub fn taint(&self) -> &BTreeMap<String, bool> {
        &self.taint
    }
    pub fn is_tainted(&self, rule_id: &str) -> bool {
        self.taint.get(rule_id).copied().unwrap_or(false)
    }
    pub fn environment(&self) -> &str {
        &self.environment
    }
    pub fn status(&self) -> RunStatus {
        self.status
    }
    pub fn pending_interrupt(&self) -> Option<&InterruptTicket> {
        self.pending_interrupt.as_ref()
    }
    pub fn last_step(&self) -> Option<&StepContext> {
        self.last_step.as_ref()
    }
    pub fn last_step_of_type(&self, instruction_type: &str) -> Option<u64> {
        self.last_step_of_type.get(instruction_type).copied()
    }
}

/// The single source of truth for a run.
///
/// `os_metadata` cannot be modified from outside the crate:
///
/// ```compile_fail
/// let mut s = arbiter_core::state::ManagedState::new("Executor", Default::default());
/// s.os_metadata().step_seq = 7;
/// ```
///
/// ```compile_fail
/// let mut s = arbiter_core::state::ManagedState::new("Executor", Default::default());
/// s.os_metadata.last_signal = arbiter_core::state::Signal::pass();
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ManagedState {
    user_memory: Map<String, Value>,
    pub(crate) os_metadata: OsMetadata,
}

impl ManagedState {
    pub fn new(environment: &str, user_memory: Map<String, Value>) -> Self {
        ManagedState {
            user_memory,
            os_metadata: OsMetadata { environment: environment.to_string(), ..OsMetadata::default() },
        }
    }

    pub fn user_memory(&self) -> &Map<String, Value> {
        &self.user_memory
    }

    pub fn os_metadata(&self) -> &OsMetadata {
        &self.os_metadata
    }

    pub fn hash(&self) -> String {
        digest_of(self)
    }
}

/// Immutable copy of a state plus its canonical digest.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    state: ManagedState,
    hash: String,
}

impl Snapshot {
    pub fn state(&self) -> &ManagedState {
        &self.state
    }
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

pub fn snapshot_state(state: &ManagedState) -> Snapshot {
    Snapshot { hash: state.hash(), state: state.clone() }
}

/// Folds one recorded event into `state`. Both the kernel's commit and
/// `materialize_at` go through here.
pub(crate) fn apply_event(state: &mut ManagedState, event: &TraceEvent) -> Result<(), StateError> {
    match event.kind {
        EventKind::Step => {
            if !event.quarantined {
                if event.output.get(REDACTED_KEY).is_some() {
                    return Err(StateError::Redacted { seq: event.seq });
                }
                merge_into(&mut state.user_memory, &event.output);
            }
            let signal = match event.escalation.as_ref().map(|e| &e.outcome) {
                Some(EscalationOutcome::RunCheck { signal, .. }) => signal.clone(),
                _ => event.signal.clone(),
            };
            let os = &mut state.os_metadata;
            os.last_confidence = signal.confidence;
            os.last_signal = signal;
            os.resources.add(&event.resource_delta);
            for (rule, flag) in &event.taint_updates {
                os.taint.insert(rule.clone(), *flag);
            }
            let step = event.seq + 1;
            os.last_step_of_type.insert(event.instruction_type.clone(), step);
            os.last_step = Some(StepContext {
                node_id: event.node_id.clone(),
                binding_id: event.binding_id.clone(),
                instruction_type: event.instruction_type.clone(),
                core: event.core.parse().map_err(|_| StateError::Parse(format!("bad core `{}`", event.core)))?,
                step,
            });
        }
        EventKind::Resume => {
            if let Some(patch) = event.output.get("patch") {
                merge_into(&mut state.user_memory, patch);
            }
        }
        EventKind::DeferredCheck => state.os_metadata.resources.add(&event.resource_delta),
        EventKind::Admission => {}
    }
    let os = &mut state.os_metadata;
    os.step_seq = event.seq + 1;
    match &event.routing {
        RoutingDecision::Interrupt { ticket } => {
            os.status = RunStatus::Interrupted;
            os.pending_interrupt = Some(ticket.clone());
        }
        RoutingDecision::Halt { .. } => {
            os.status = RunStatus::Halted;
            os.pending_interrupt = None;
        }
        _ => {
            os.status = RunStatus::Running;
            os.pending_interrupt = None;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn memory(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn empty_state_hash_is_stable() {
        let a = ManagedState::new("", Map::new());
        let b = ManagedState::new("", Map::new());
        assert_eq!(snapshot_state(&a).hash(), snapshot_state(&b).hash());
        let expected = crate::canonical::digest_bytes(crate::canonical::to_canonical(&a).as_bytes());
        assert_eq!(a.hash(), expected);
    }

    #[test]
    fn key_order_does_not_matter() {
        let a = ManagedState::new("E", memory(json!({"a": 1, "b": [1, 2]})));
        let mut m = Map::new();
        m.insert("b".into(), json!([1, 2]));
        m.insert("a".into(), json!(1));
        let b = ManagedState::new("E", m);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn one_key_changes_hash() {
        let a = ManagedState::new("E", memory(json!({"a": 1})));
        let b = ManagedState::new("E", memory(json!({"a": 2})));
        assert_ne!(a.hash(), b.hash());
    }
}
