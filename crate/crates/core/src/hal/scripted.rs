use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::Value;

use super::{Backend, BackendRequest, BackendResponse, HalError};
use crate::canonical::digest_value;
use crate::state::{CallRecord, FlightRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Fault {
    Transport,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct Item {
    #[serde(default)]
    output: Value,
    #[serde(default)]
    tokens: u64,
    #[serde(default)]
    cost: f64,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    error: Option<Fault>,
    #[serde(default)]
    message: Option<String>,
    #[serde(default)]
    latency: u64,
    #[serde(default)]
    input: Option<Value>,
    #[serde(default)]
    input_hash: Option<String>,
}

impl Item {
    fn respond(&self, key: &str) -> Result<BackendResponse, HalError> {
        let msg = || self.message.clone().unwrap_or_else(|| format!("injected fault for `{key}`"));
        match self.error {
            Some(Fault::Tool) => Err(HalError::Tool(msg())),
            Some(Fault::Transport) => Err(HalError::Transport(msg())),
            None => Ok(BackendResponse {
                output: self.output.clone(),
                tokens_used: self.tokens,
                cost_units: self.cost,
                confidence: self.confidence,
                latency_ticks: self.latency,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Script {
    Sequence { items: Vec<Item>, cycle: bool },
    ByInputHash(BTreeMap<String, Item>),
}

/// Deterministic backend serving responses from a fixture file, either in
/// order per key or looked up by the digest of the rendered input.
#[derive(Debug)]
pub struct ScriptedBackend {
    scripts: BTreeMap<String, Script>,
    cursors: Mutex<BTreeMap<String, usize>>,
    hash: String,
}

fn fparse(msg: impl Into<String>) -> HalError {
    HalError::FixtureParse(msg.into())
}

fn parse_item(key: &str, v: &Value) -> Result<Item, HalError> {
    let item: Item = serde_json::from_value(v.clone()).map_err(|e| fparse(format!("`{key}`: {e}")))?;
    if let Some(p) = item.confidence {
        if !(0.0..=1.0).contains(&p) {
            return Err(fparse(format!("`{key}`: confidence {p} outside [0, 1]")));
        }
    }
    if item.cost < 0.0 || !item.cost.is_finite() {
        return Err(fparse(format!("`{key}`: cost must be a nonnegative number")));
    }
    Ok(item)
}

fn parse_script(key: &str, v: &Value) -> Result<Script, HalError> {
    let (mode, items, cycle) = match v {
        Value::Array(_) => ("sequence", v, false),
        Value::Object(m) => {
            if let Some(k) = m.keys().find(|k| !["mode", "items", "cycle"].contains(&k.as_str())) {
                return Err(fparse(format!("`{key}`: unknown key `{k}`")));
            }
            let mode = m.get("mode").and_then(Value::as_str).unwrap_or("sequence");
            let items = m.get("items").ok_or_else(|| fparse(format!("`{key}`: missing `items`")))?;
            (mode, items, m.get("cycle").and_then(Value::as_bool).unwrap_or(false))
        }
        _ => return Err(fparse(format!("`{key}`: expected a list or mapping"))),
    };
    match mode {
        "sequence" => {
            let list = items.as_array().ok_or_else(|| fparse(format!("`{key}`: sequence items must be a list")))?;
            let items = list.iter().map(|i| parse_item(key, i)).collect::<Result<Vec<_>, _>>()?;
            if cycle && items.is_empty() {
                return Err(fparse(format!("`{key}`: cycling sequence needs at least one item")));
            }
            Ok(Script::Sequence { items, cycle })
        }
        "by_input_hash" => {
            let mut table = BTreeMap::new();
            match items {
                Value::Object(m) => {
                    for (hash, i) in m {
                        table.insert(hash.clone(), parse_item(key, i)?);
                    }
                }
                Value::Array(list) => {
                    for i in list {
                        let item = parse_item(key, i)?;
                        let hash = match (&item.input_hash, &item.input) {
                            (Some(h), _) => h.clone(),
                            (None, Some(input)) => digest_value(input),
                            (None, None) => return Err(fparse(format!("`{key}`: item needs `input` or `input_hash`"))),
                        };
                        table.insert(hash, item);
                    }
                }
                _ => return Err(fparse(format!("`{key}`: items must be a list or mapping"))),
            }
            Ok(Script::ByInputHash(table))
        }
        other => Err(fparse(format!("`{key}`: unknown mode `{other}`"))),
    }
}

/// Parses a fixture document: `responses: {key: {mode, items}}`. A bare list
/// is shorthand for a sequence.
pub fn parse_fixture(doc: &Value) -> Result<ScriptedBackend, HalError> {
    let map = doc.as_object().ok_or_else(|| fparse("fixture must be a mapping"))?;
    if let Some(k) = map.keys().find(|k| *k != "responses" && *k != "description") {
        return Err(fparse(format!("unknown top-level key `{k}`")));
    }
    let mut scripts = BTreeMap::new();
    if let Some(responses) = map.get("responses") {
        for (key, v) in responses.as_object().ok_or_else(|| fparse("`responses` must be a mapping"))? {
            scripts.insert(key.clone(), parse_script(key, v)?);
        }
    }
    Ok(ScriptedBackend { scripts, cursors: Mutex::new(BTreeMap::new()), hash: digest_value(doc) })
}

pub fn load_fixture(path: &Path) -> Result<ScriptedBackend, HalError> {
    let text = std::fs::read_to_string(path).map_err(|e| fparse(format!("{}: {e}", path.display())))?;
    let doc: Value = serde_yaml::from_str(&text).map_err(|e| fparse(format!("{}: {e}", path.display())))?;
    parse_fixture(&doc)
}

impl ScriptedBackend {
    /// Digest of the fixture document.
    pub fn fixture_hash(&self) -> &str {
        &self.hash
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.scripts.keys().map(String::as_str)
    }

    /// Responses consumed so far per sequence key.
    pub fn consumed(&self) -> BTreeMap<String, usize> {
        self.cursors.lock().expect("cursor lock").clone()
    }
}

impl Backend for ScriptedBackend {
    fn invoke(&self, request: &BackendRequest) -> Result<BackendResponse, HalError> {
        let key = &request.binding_id;
        match self.scripts.get(key) {
            None => Err(HalError::FixtureExhausted(format!("{key} (no script)"))),
            Some(Script::Sequence { items, cycle }) => {
                let mut cursors = self.cursors.lock().expect("cursor lock");
                let pos = cursors.entry(key.clone()).or_insert(0);
                let idx = if *cycle { *pos % items.len() } else { *pos };
                let item = items.get(idx).ok_or_else(|| HalError::FixtureExhausted(key.clone()))?;
                *pos += 1;
                item.respond(key)
            }
            Some(Script::ByInputHash(table)) => {
                let hash = request.input_hash();
                table
                    .get(&hash)
                    .ok_or_else(|| HalError::FixtureExhausted(format!("{key} (no entry for input {hash})")))?
                    .respond(key)
            }
        }
    }

    fn fast_forward(&self, consumed: &BTreeMap<String, usize>) {
        let mut cursors = self.cursors.lock().expect("cursor lock");
        for (k, n) in consumed {
            if matches!(self.scripts.get(k), Some(Script::Sequence { .. })) {
                cursors.insert(k.clone(), *n);
            }
        }
    }
}

/// Serves the backend calls stored in a flight record, per key in the order
/// they were made.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    queues: Mutex<BTreeMap<String, VecDeque<CallRecord>>>,
}

impl ReplayBackend {
    pub fn from_record(record: &FlightRecord) -> Self {
        let mut queues: BTreeMap<String, VecDeque<CallRecord>> = BTreeMap::new();
        for call in record.events().iter().flat_map(|e| &e.calls) {
            queues.entry(call.key.clone()).or_default().push_back(call.clone());
        }
        ReplayBackend { queues: Mutex::new(queues) }
    }

    fn pop(&self, key: &str) -> Option<CallRecord> {
        self.queues.lock().expect("queue lock").get_mut(key).and_then(VecDeque::pop_front)
    }
}

impl Backend for ReplayBackend {
    fn invoke(&self, request: &BackendRequest) -> Result<BackendResponse, HalError> {
        let call = self.pop(&request.binding_id).ok_or_else(|| HalError::FixtureExhausted(request.binding_id.clone()))?;
        match (call.response, call.error) {
            (Some(r), _) => Ok(r),
            (None, Some(e)) => Err(HalError::from_record(&e)),
            (None, None) => Err(HalError::FixtureExhausted(request.binding_id.clone())),
        }
    }

    fn recorded_call(&self, key: &str) -> Option<CallRecord> {
        self.pop(key)
    }
}

/// Counts recorded calls per key, for fast-forwarding a fresh fixture.
pub(crate) fn consumed_calls(record: &FlightRecord) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for call in record.events().iter().flat_map(|e| &e.calls) {
        *out.entry(call.key.clone()).or_insert(0) += 1;
    }
    out
}
