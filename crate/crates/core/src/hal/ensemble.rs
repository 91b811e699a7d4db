use serde::{Deserialize, Serialize};

use super::{Backend, BackendRequest, BackendResponse, HalError};
use crate::parallel::Execution;
use crate::state::{CallRecord, SignalKind};

/// One judge in a verification ensemble.
pub struct JudgeCall<'a> {
    pub id: String,
    pub backend: &'a dyn Backend,
    pub request: BackendRequest,
}

/// A single judge's interpreted verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub judge: String,
    pub verdict: SignalKind,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Raw outcome of one judge call, paired with its trace record.
#[derive(Debug, Clone)]
pub struct JudgeResult {
    pub id: String,
    pub result: Result<BackendResponse, HalError>,
    pub record: CallRecord,
}

/// Fans the calls out and returns results sorted by judge id, so the outcome
/// does not depend on completion order.
pub fn invoke_ensemble(calls: &[JudgeCall<'_>], exec: Execution) -> Vec<JudgeResult> {
    let mut out = exec.map(calls, |c| {
        let result = c.request_result();
        JudgeResult { id: c.id.clone(), record: c.record(&result), result }
    });
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

impl JudgeCall<'_> {
    fn request_result(&self) -> Result<BackendResponse, HalError> {
        match self.backend.recorded_call(&self.request.binding_id) {
            Some(rec) => match (rec.response, rec.error) {
                (Some(r), _) => Ok(r),
                (None, Some(e)) => Err(HalError::from_record(&e)),
                (None, None) => Err(HalError::FixtureExhausted(self.request.binding_id.clone())),
            },
            None => self.backend.invoke(&self.request),
        }
    }

    fn record(&self, result: &Result<BackendResponse, HalError>) -> CallRecord {
        CallRecord {
            key: self.request.binding_id.clone(),
            judge: Some(self.id.clone()),
            input_hash: self.request.input_hash(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(HalError::to_record),
            child: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hal::parse_fixture;
    use serde_json::json;

    #[test]
    fn results_sorted_by_id_in_both_modes() {
        for exec in [Execution::Parallel, Execution::Sequential] {
            let fx = parse_fixture(&json!({"responses": {
                "s.judge.0": [{"output": {"verdict": "PASS"}}],
                "s.judge.1": [{"error": "transport"}],
                "s.judge.2": [{"output": {"verdict": "FAIL"}}],
            }}))
            .unwrap();
            let calls: Vec<JudgeCall> = (0..3)
                .rev()
                .map(|i| JudgeCall { id: format!("judge-{i}"), backend: &fx, request: BackendRequest::new(format!("s.judge.{i}"), json!({})) })
                .collect();
            let res = invoke_ensemble(&calls, exec);
            let ids: Vec<&str> = res.iter().map(|r| r.id.as_str()).collect();
            assert_eq!(ids, ["judge-0", "judge-1", "judge-2"]);
            assert!(res[1].result.is_err());
            assert_eq!(res[1].record.error.as_ref().unwrap().kind, "transport");
        }
    }
}
