use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::managed::ManagedState;
use super::trace::{FlightRecord, InterruptTicket};
use super::StateError;
use crate::canonical::to_canonical;

/// Everything needed to resume an interrupted run. Written as
/// `<ticket>.ckpt.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub constitution_hash: String,
    pub state: ManagedState,
    pub state_hash: String,
    pub record_position: u64,
    pub chain_head: String,
    pub ticket: InterruptTicket,
    pub config: Value,
    /// Caller-supplied locations such as `trace_path`, `constitution_path`
    /// and `backend`.
    #[serde(default)]
    pub session: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn file_name(ticket_id: &str) -> String {
        format!("{ticket_id}.ckpt.json")
    }

    pub fn to_json(&self) -> String {
        to_canonical(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), StateError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, StateError> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| StateError::CheckpointCorrupt(e.to_string()))?;
        ckpt.verify()?;
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self, StateError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn verify(&self) -> Result<(), StateError> {
        if self.state.hash() != self.state_hash {
            return Err(StateError::CheckpointCorrupt("state hash does not match contents".into()));
        }
        if self.state.os_metadata().pending_interrupt() != Some(&self.ticket) {
            return Err(StateError::CheckpointCorrupt("ticket does not match pending interrupt".into()));
        }
        Ok(())
    }

    /// Checks that `record` is exactly the record this checkpoint was cut from.
    pub fn matches_record(&self, record: &FlightRecord) -> Result<(), StateError> {
        let last = record.events().last().map(|e| e.state_hash.as_str());
        if record.len() as u64 != self.record_position
            || record.chain_head() != self.chain_head
            || last != Some(self.state_hash.as_str())
            || record.header().constitution_hash != self.constitution_hash
        {
            return Err(StateError::CheckpointCorrupt("trace does not match checkpoint position".into()));
        }
        Ok(())
    }
}
