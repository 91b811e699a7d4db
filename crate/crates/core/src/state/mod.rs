//! Managed state, the flight record and time travel over it.

mod checkpoint;
mod managed;
mod replay;
mod trace;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use managed::{
    snapshot_state, Limits, ManagedState, OsMetadata, ResourceCounters, RunStatus, Signal, SignalKind, Snapshot,
    StepContext,
};
pub(crate) use managed::apply_event;
pub use replay::{materialize_at, verify_replay, ReplayVerdict};
pub use trace::{
    event_digest, CallError, CallRecord, ChildRef, EscalationOutcome, EscalationRecord, EventKind, FlightRecord,
    HaltReason, InterruptTicket, PolicyDecisionRecord, RecordHeader, RoutingDecision, TraceEvent, REDACTED_KEY,
};

#[derive(Debug, Error)]
pub enum StateError {
    #[error("chain break at seq {seq}: {reason}")]
    ChainBreak { seq: u64, reason: String },
    #[error("step {k} out of range (record has {len} events)")]
    OutOfRange { k: usize, len: usize },
    #[error("event {seq} carries a redacted output and cannot be materialized")]
    Redacted { seq: u64 },
    #[error("state hash mismatch after event {seq}")]
    HashMismatch { seq: u64 },
    #[error("record header does not match constitution (record {recorded}, constitution {actual})")]
    HeaderMismatch { recorded: String, actual: String },
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("replay could not be performed: {0}")]
    Unverifiable(String),
    #[error("malformed trace: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
