use serde::Serialize;

use super::managed::{apply_event, ManagedState};
use super::trace::{EventKind, FlightRecord, TraceEvent, REDACTED_KEY};
use super::StateError;
use crate::canonical::to_canonical;
use crate::graph::Constitution;
use crate::hal::ReplayBackend;
use crate::kernel::{Kernel, ResumeDecision, RunConfig, RunOptions};

/// State after the first `k` events; `k = 0` is the initial state.
pub fn materialize_at(record: &FlightRecord, k: usize) -> Result<ManagedState, StateError> {
    let events = record.events();
    if k > events.len() {
        return Err(StateError::OutOfRange { k, len: events.len() });
    }
    let mut state = record.header().initial_state.clone();
    for event in &events[..k] {
        apply_event(&mut state, event)?;
        if state.hash() != event.state_hash {
            return Err(StateError::HashMismatch { seq: event.seq });
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ReplayVerdict {
    Equivalent,
    FirstDivergence { seq: u64, field: String },
}

fn is_redacted(event: &TraceEvent) -> bool {
    event.output.get(REDACTED_KEY).is_some()
        || event
            .calls
            .iter()
            .any(|c| c.response.as_ref().is_some_and(|r| r.output.get(REDACTED_KEY).is_some()))
}

fn first_difference(a: &TraceEvent, b: &TraceEvent) -> Option<String> {
    let (va, vb) = (serde_json::to_value(a).ok()?, serde_json::to_value(b).ok()?);
    let (oa, ob) = (va.as_object()?, vb.as_object()?);
    oa.keys().chain(ob.keys()).find(|k| oa.get(*k) != ob.get(*k)).cloned()
}

/// Re-executes the run against the recorded backend responses and compares
/// every re-executed event with the recorded one.
pub fn verify_replay(record: &FlightRecord, constitution: &Constitution) -> Result<ReplayVerdict, StateError> {
    let header = record.header();
    if header.constitution_hash != constitution.version_hash() {
        return Err(StateError::HeaderMismatch {
            recorded: header.constitution_hash.clone(),
            actual: constitution.version_hash().to_string(),
        });
    }
    if let Some(e) = record.events().iter().find(|e| is_redacted(e)) {
        return Err(StateError::Unverifiable(format!("event {} has a redacted output", e.seq)));
    }
    let config: RunConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| StateError::Unverifiable(format!("header config: {e}")))?;
    let backend = ReplayBackend::from_record(record);
    let options = RunOptions::default();
    let kernel = Kernel::new(constitution, &config, &backend).with_options(&options);
    let initial = serde_json::Value::Object(header.initial_state.user_memory().clone());
    let mut outcome = kernel.run(initial).map_err(|e| StateError::Unverifiable(e.to_string()))?;
    loop {
        let next = record.events().get(outcome.record.len());
        let (Some(ticket), Some(event)) = (outcome.interrupt.clone(), next) else { break };
        if event.kind != EventKind::Resume {
            break;
        }
        let decision = ResumeDecision::from_document(&event.output)
            .map_err(|e| StateError::Unverifiable(format!("event {}: {e}", event.seq)))?;
        let checkpoint = outcome
            .checkpoint
            .clone()
            .ok_or_else(|| StateError::Unverifiable(format!("no checkpoint for ticket {}", ticket.id)))?;
        outcome = kernel
            .resume(&checkpoint, outcome.record, decision)
            .map_err(|e| StateError::Unverifiable(e.to_string()))?;
    }
    let replayed = outcome.record.events();
    for (a, b) in record.events().iter().zip(replayed) {
        if to_canonical(a) != to_canonical(b) {
            let field = first_difference(a, b).unwrap_or_else(|| "event".into());
            return Ok(ReplayVerdict::FirstDivergence { seq: a.seq, field });
        }
    }
    if record.len() != replayed.len() {
        let seq = record.len().min(replayed.len()) as u64;
        return Ok(ReplayVerdict::FirstDivergence { seq, field: "length".into() });
    }
    Ok(ReplayVerdict::Equivalent)
}
