//! Backend interface over the model, plus the scripted, echo, replay and
//! remote implementations.

mod echo;
mod ensemble;
#[cfg(feature = "remote")]
mod remote;
mod scripted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::state::{CallError, CallRecord};

pub use echo::EchoBackend;
pub use ensemble::{invoke_ensemble, JudgeCall, Vote};
#[cfg(feature = "remote")]
pub use remote::RemoteBackend;
pub(crate) use scripted::consumed_calls;
pub use scripted::{load_fixture, parse_fixture, ReplayBackend, ScriptedBackend};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HalError {
    #[error("fixture exhausted for `{0}`")]
    FixtureExhausted(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("tool error: {0}")]
    Tool(String),
    #[error("not supported: {0}")]
    NotSupported(String),
    #[error("fixture parse error: {0}")]
    FixtureParse(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
}

impl HalError {
    pub fn kind(&self) -> &'static str {
        match self {
            HalError::FixtureExhausted(_) => "fixture_exhausted",
            HalError::Transport(_) => "transport",
            HalError::Tool(_) => "tool",
            HalError::NotSupported(_) => "not_supported",
            HalError::FixtureParse(_) => "fixture_parse",
            HalError::Template(_) => "template",
            HalError::InvalidEnsemble(_) => "invalid_ensemble",
        }
    }

    pub fn to_record(&self) -> CallError {
        let message = match self {
            HalError::FixtureExhausted(m)
            | HalError::Transport(m)
            | HalError::Tool(m)
            | HalError::NotSupported(m)
            | HalError::FixtureParse(m)
            | HalError::Template(m)
            | HalError::InvalidEnsemble(m) => m.clone(),
        };
        CallError { kind: self.kind().to_string(), message }
    }

    pub fn from_record(e: &CallError) -> Self {
        let m = e.message.clone();
        match e.kind.as_str() {
            "fixture_exhausted" => HalError::FixtureExhausted(m),
            "tool" => HalError::Tool(m),
            "not_supported" => HalError::NotSupported(m),
            "fixture_parse" => HalError::FixtureParse(m),
            "template" => HalError::Template(m),
            "invalid_ensemble" => HalError::InvalidEnsemble(m),
            _ => HalError::Transport(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RequestParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_rubric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    /// Routing key: the binding id, or `<binding>.judge[.<i>]` for judges.
    pub binding_id: String,
    pub rendered_input: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default)]
    pub params: RequestParams,
}

impl BackendRequest {
    pub fn new(binding_id: impl Into<String>, rendered_input: Value) -> Self {
        BackendRequest { binding_id: binding_id.into(), rendered_input, prompt: None, params: RequestParams::default() }
    }

    pub fn input_hash(&self) -> String {
        crate::canonical::digest_value(&self.rendered_input)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BackendResponse {
    pub output: Value,
    #[serde(default)]
    pub tokens_used: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub cost_units: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub latency_ticks: u64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl BackendResponse {
    pub fn new(output: Value) -> Self {
        BackendResponse { output, ..Default::default() }
    }
}

/// A model or tool endpoint. Implementations must tolerate concurrent
/// `invoke` calls from ensemble fan-out.
pub trait Backend: Send + Sync {
    fn invoke(&self, request: &BackendRequest) -> Result<BackendResponse, HalError>;

    /// Recorded outcome for a key, when the backend replays a trace.
    fn recorded_call(&self, _key: &str) -> Option<CallRecord> {
        None
    }

    /// Skips responses already consumed by an earlier part of the run.
    fn fast_forward(&self, _consumed: &BTreeMap<String, usize>) {}
}

pub fn invoke_backend(backend: &dyn Backend, request: &BackendRequest) -> Result<BackendResponse, HalError> {
    backend.invoke(request)
}

fn lookup<'a>(memory: &'a Map<String, Value>, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = memory.get(parts.next()?)?;
    for p in parts {
        cur = cur.get(p)?;
    }
    Some(cur)
}

/// `{{key}}` substitution (dotted paths allowed). Strings are inserted raw,
/// other values as compact JSON. A missing key is an error.
pub fn render_template(template: &str, memory: &Map<String, Value>) -> Result<String, HalError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| HalError::Template("unclosed `{{`".into()))?;
        let key = after[..end].trim();
        let value = lookup(memory, key).ok_or_else(|| HalError::Template(format!("missing template key `{key}`")))?;
        match value {
            Value::String(s) => out.push_str(s),
            other => out.push_str(&crate::canonical::canonical_json(other)),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn template_substitution() {
        let mem = json!({"document": "hello", "meta": {"n": 2}}).as_object().unwrap().clone();
        assert_eq!(render_template("Summarize: {{ document }} ({{meta.n}})", &mem).unwrap(), "Summarize: hello (2)");
        assert_eq!(
            render_template("{{missing}}", &mem),
            Err(HalError::Template("missing template key `missing`".into()))
        );
        assert!(render_template("{{document", &mem).is_err());
    }

    #[test]
    fn echo_mirrors_input() {
        let r = invoke_backend(&EchoBackend, &BackendRequest::new("b", json!({"q": "x"}))).unwrap();
        assert_eq!(r.output, json!({"q": "x"}));
        assert_eq!(r.tokens_used, 0);
    }

    #[test]
    fn errors_survive_record_round_trip() {
        for e in [HalError::Tool("boom".into()), HalError::Transport("t".into()), HalError::FixtureExhausted("k".into())] {
            assert_eq!(HalError::from_record(&e.to_record()), e);
        }
    }
}
