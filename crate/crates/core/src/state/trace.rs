use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::managed::{ManagedState, ResourceCounters, Signal};
use super::StateError;
use crate::canonical::{digest_of, to_canonical, HASH_ALGORITHM};
use crate::hal::BackendResponse;
use crate::policy::Verdict;

/// Marker key used in place of a redacted output.
pub const REDACTED_KEY: &str = "$redacted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    Completed,
    Denied,
    BudgetExhausted,
    NoRoute,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterruptTicket {
    pub id: String,
    pub seq: u64,
    pub node_id: String,
    pub binding_id: String,
    pub reason: String,
    /// Signal the routing decision resumes with.
    pub signal: Signal,
    /// File name of the checkpoint written for this ticket.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingDecision {
    Continue { node: String },
    Fallback { node: String },
    Replan { node: String },
    Interrupt { ticket: InterruptTicket },
    Halt {
        reason: HaltReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
}

impl RoutingDecision {
    pub fn halt(reason: HaltReason, detail: impl Into<Option<String>>) -> Self {
        RoutingDecision::Halt { reason, detail: detail.into() }
    }

    pub fn target(&self) -> Option<&str> {
        match self {
            RoutingDecision::Continue { node } | RoutingDecision::Fallback { node } | RoutingDecision::Replan { node } => {
                Some(node)
            }
            _ => None,
        }
    }

    pub fn halt_reason(&self) -> Option<HaltReason> {
        match self {
            RoutingDecision::Halt { reason, .. } => Some(*reason),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RoutingDecision::Continue { .. } => "continue",
            RoutingDecision::Fallback { .. } => "fallback",
            RoutingDecision::Replan { .. } => "replan",
            RoutingDecision::Interrupt { .. } => "interrupt",
            RoutingDecision::Halt { .. } => "halt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Step,
    Admission,
    Resume,
    DeferredCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRef {
    pub path: String,
    pub record_hash: String,
    pub routing: RoutingDecision,
}

/// One backend round trip made during a step, in call order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
    pub input_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<BackendResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<CallError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<ChildRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum EscalationOutcome {
    Accept,
    RunCheck { validator: String, signal: Signal },
    Interrupt { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub threshold: f64,
    #[serde(flatten)]
    pub outcome: EscalationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecisionRecord {
    pub rule_id: String,
    pub decision: Verdict,
    /// Binding the decision was made about.
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub node_id: String,
    pub binding_id: String,
    pub instruction_type: String,
    pub core: String,
    pub input_hash: String,
    pub output: Value,
    pub quarantined: bool,
    pub calls: Vec<CallRecord>,
    pub signal: Signal,
    pub error: Option<String>,
    pub escalation: Option<EscalationRecord>,
    pub resource_delta: ResourceCounters,
    pub policy_decisions: Vec<PolicyDecisionRecord>,
    pub routing: RoutingDecision,
    pub taint_updates: BTreeMap<String, bool>,
    pub state_hash: String,
    pub prev_event_hash: String,
}

pub fn event_digest(event: &TraceEvent) -> String {
    digest_of(event)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub constitution_hash: String,
    pub environment: String,
    pub started_at: u64,
    pub hash_algorithm: String,
    pub initial_state: ManagedState,
    pub config: Value,
}

impl RecordHeader {
    pub fn new(constitution_hash: &str, initial_state: ManagedState, config: Value) -> Self {
        RecordHeader {
            constitution_hash: constitution_hash.to_string(),
            environment: initial_state.os_metadata().environment().to_string(),
            started_at: 0,
            hash_algorithm: HASH_ALGORITHM.to_string(),
            initial_state,
            config,
        }
    }
}

/// Append-only, hash-chained log of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightRecord {
    header: RecordHeader,
    events: Vec<TraceEvent>,
    head: String,
}

impl FlightRecord {
    pub fn new(header: RecordHeader) -> Self {
        let head = header.constitution_hash.clone();
        FlightRecord { header, events: Vec::new(), head }
    }

    pub fn header(&self) -> &RecordHeader {
        &self.header
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Digest the next event must carry as `prev_event_hash`.
    pub fn chain_head(&self) -> &str {
        &self.head
    }

    pub fn append_event(&mut self, event: TraceEvent) -> Result<(), StateError> {
        if event.seq != self.events.len() as u64 {
            return Err(StateError::ChainBreak {
                seq: event.seq,
                reason: format!("expected seq {}", self.events.len()),
            });
        }
        if event.prev_event_hash != self.head {
            return Err(StateError::ChainBreak { seq: event.seq, reason: "prev_event_hash does not match chain head".into() });
        }
        self.head = event_digest(&event);
        self.events.push(event);
        Ok(())
    }

    /// Rebuilds a record event by event, checking every link.
    pub fn from_parts(header: RecordHeader, events: Vec<TraceEvent>) -> Result<Self, StateError> {
        let mut record = FlightRecord::new(header);
        for e in events {
            record.append_event(e)?;
        }
        Ok(record)
    }

    pub fn verify_chain(&self) -> Result<(), StateError> {
        FlightRecord::from_parts(self.header.clone(), self.events.clone()).map(|_| ())
    }

    /// Newline-delimited JSON, header first.
    pub fn to_ndjson(&self) -> String {
        let mut out = to_canonical(&self.header);
        out.push('\n');
        for e in &self.events {
            out.push_str(&to_canonical(e));
            out.push('\n');
        }
        out
    }

    /// Parses without checking the chain, so tampered traces can still be
    /// inspected. Use `verify_chain` for integrity.
    pub fn from_ndjson_unchecked(text: &str) -> Result<Self, StateError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines.next().ok_or_else(|| StateError::Parse("empty trace".into()))?;
        let header: RecordHeader =
            serde_json::from_str(header_line).map_err(|e| StateError::Parse(format!("header: {e}")))?;
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let e: TraceEvent = serde_json::from_str(line).map_err(|e| StateError::Parse(format!("event {i}: {e}")))?;
            events.push(e);
        }
        let head = events.last().map(event_digest).unwrap_or_else(|| header.constitution_hash.clone());
        Ok(FlightRecord { header, events, head })
    }

    pub fn from_ndjson(text: &str) -> Result<Self, StateError> {
        let r = Self::from_ndjson_unchecked(text)?;
        FlightRecord::from_parts(r.header, r.events)
    }

    pub fn write(&self, path: &Path) -> Result<(), StateError> {
        std::fs::write(path, self.to_ndjson())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, StateError> {
        Self::from_ndjson_unchecked(&std::fs::read_to_string(path)?)
    }

    /// Final routing of the run so far, ignoring deferred-check entries.
    pub fn final_routing(&self) -> Option<&RoutingDecision> {
        self.events.iter().rev().find(|e| e.kind != EventKind::DeferredCheck).map(|e| &e.routing)
    }

    pub fn steps(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Step)
    }
}
