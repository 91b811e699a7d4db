//! Deterministic validators, judge checks with confidence, k-of-n ensembles
//! and CONSTRAIN rule sets.

mod config;
mod validators;

use num_rational::Ratio;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::acf::{validate_schema, SchemaSpec};
use crate::hal::{invoke_ensemble, Backend, BackendRequest, HalError, JudgeCall, Vote};
use crate::parallel::Execution;
use crate::state::{CallRecord, Signal, SignalKind};

pub use config::{EnsembleSpec, EscalationAction, VerificationConfig, MAX_ENSEMBLE};
pub use validators::{
    apply_constraints, run_deterministic_check, ConstraintFinding, ConstraintRule, Validator, ValidatorRegistry,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("unknown validator `{0}`")]
    UnknownValidator(String),
    #[error("invalid validator configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
}

/// Shape every judge response must have.
pub fn judge_schema() -> SchemaSpec {
    let mut confidence = SchemaSpec::number();
    if let crate::acf::SchemaKind::Number { min, max } = &mut confidence.kind {
        *min = Some(0.0);
        *max = Some(1.0);
    }
    SchemaSpec::record([
        ("verdict", SchemaSpec::enumeration([json!("PASS"), json!("FAIL")])),
        ("confidence", confidence),
        ("reasoning", SchemaSpec::string()),
    ])
}

/// Reads a judge response. Anything that does not match the judge schema,
/// and any backend error, is a FAIL with confidence 0.
pub fn interpret_judge(result: &Result<crate::hal::BackendResponse, HalError>) -> Signal {
    let response = match result {
        Ok(r) => r,
        Err(e) => return Signal::fail(format!("judge error: {e}")).with_confidence(0.0),
    };
    let report = validate_schema(&response.output, &judge_schema());
    if !report.conforms() {
        return Signal::fail(format!("nonconforming judge output: {}", report.summary())).with_confidence(0.0);
    }
    let out = &response.output;
    let p = out["confidence"].as_f64().unwrap_or(0.0);
    let reasoning = out["reasoning"].as_str().unwrap_or_default().to_string();
    let kind = if out["verdict"] == "PASS" { SignalKind::Pass } else { SignalKind::Fail };
    Signal { kind, confidence: Some(p), reason: Some(reasoning).filter(|r| !r.is_empty()) }
}

fn judge_request(key: &str, value: &Value, rubric: &str) -> BackendRequest {
    let mut req = BackendRequest::new(key, json!({ "rubric": rubric, "value": value }));
    req.params.judge_rubric = Some(rubric.to_string());
    req
}

/// One rubric-guided judge call. Returns the signal and the call record.
pub fn run_judge_check(value: &Value, rubric: &str, backend: &dyn Backend, key: &str) -> (Signal, CallRecord) {
    let calls = [JudgeCall { id: "judge".into(), backend, request: judge_request(key, value, rubric) }];
    let mut results = invoke_ensemble(&calls, Execution::Sequential);
    let r = results.remove(0);
    (interpret_judge(&r.result), r.record)
}

/// k-of-n verdict. `ratio` is the exact PASS share and doubles as the
/// signal's confidence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub signal: Signal,
    #[serde(serialize_with = "ser_ratio")]
    pub ratio: Ratio<u64>,
    pub passes: u64,
    pub n: u64,
    pub k: u64,
}

fn ser_ratio<S: serde::Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

fn ratio_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Counts PASS votes; NONE and FAIL both count against.
pub fn combine_ensemble(results: &[Signal], k: usize) -> Result<EnsembleResult, VerifyError> {
    let n = results.len();
    if n == 0 || k == 0 || k > n {
        return Err(VerifyError::InvalidEnsemble(format!("need 1 <= k <= n, got n={n}, k={k}")));
    }
    let passes = results.iter().filter(|s| s.is_pass()).count() as u64;
    let ratio = Ratio::new(passes, n as u64);
    let kind = if passes >= k as u64 { SignalKind::Pass } else { SignalKind::Fail };
    let reason = (kind == SignalKind::Fail).then(|| format!("{passes} of {n} judges passed, {k} required"));
    Ok(EnsembleResult {
        signal: Signal { kind, confidence: Some(ratio_f64(&ratio)), reason },
        ratio,
        passes,
        n: n as u64,
        k: k as u64,
    })
}

/// Result of fanning a check out to several judges.
#[derive(Debug, Clone)]
pub struct JudgedEnsemble {
    pub result: EnsembleResult,
    pub votes: Vec<Vote>,
    pub calls: Vec<CallRecord>,
}

/// Stable judge id for position `i`; zero-padded so ids sort numerically.
pub fn judge_id(i: usize) -> String {
    format!("judge-{i:02}")
}

/// Routing key for judge `i` of a binding's ensemble.
pub fn judge_key(binding: &str, i: usize) -> String {
    format!("{binding}.judge.{i}")
}

/// Asks `n` judges (keys `<binding>.judge.<i>`) and combines their votes.
pub fn run_judge_ensemble(
    value: &Value,
    rubric: &str,
    backend: &dyn Backend,
    binding: &str,
    spec: EnsembleSpec,
    exec: Execution,
) -> Result<JudgedEnsemble, VerifyError> {
    let n = spec.n as usize;
    let calls: Vec<JudgeCall> = (0..n)
        .map(|i| JudgeCall { id: judge_id(i), backend, request: judge_request(&judge_key(binding, i), value, rubric) })
        .collect();
    let results = invoke_ensemble(&calls, exec);
    let signals: Vec<Signal> = results.iter().map(|r| interpret_judge(&r.result)).collect();
    let result = combine_ensemble(&signals, spec.k as usize)?;
    let votes = results
        .iter()
        .zip(&signals)
        .map(|(r, s)| Vote {
            judge: r.id.clone(),
            verdict: s.kind,
            confidence: s.confidence.unwrap_or(0.0),
            error: r.result.as_ref().err().map(ToString::to_string),
        })
        .collect();
    Ok(JudgedEnsemble { result, votes, calls: results.into_iter().map(|r| r.record).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hal::{parse_fixture, BackendResponse};

    fn votes(s: &str) -> Vec<Signal> {
        s.chars().map(|c| if c == 'P' { Signal::pass() } else { Signal::fail("no") }).collect()
    }

    #[test]
    fn k_of_n_vectors() {
        let r = combine_ensemble(&votes("PPF"), 2).unwrap();
        assert!(r.signal.is_pass());
        assert_eq!(r.ratio, Ratio::new(2, 3));
        let r = combine_ensemble(&votes("PPPFF"), 4).unwrap();
        assert!(r.signal.is_fail());
        assert_eq!(r.ratio, Ratio::new(3, 5));
        assert!(combine_ensemble(&[], 1).is_err());
        assert!(combine_ensemble(&votes("P"), 2).is_err());
    }

    #[test]
    fn judge_outputs_are_firewalled() {
        let ok = Ok(BackendResponse::new(json!({"verdict": "PASS", "confidence": 0.93, "reasoning": "faithful"})));
        let s = interpret_judge(&ok);
        assert!(s.is_pass());
        assert_eq!(s.confidence, Some(0.93));
        for bad in [json!({"verdict": "PASS"}), json!({"verdict": "MAYBE", "confidence": 0.9, "reasoning": ""}), json!("PASS"),
                    json!({"verdict": "PASS", "confidence": 1.4, "reasoning": ""})] {
            let s = interpret_judge(&Ok(BackendResponse::new(bad)));
            assert!(s.is_fail());
            assert_eq!(s.confidence, Some(0.0));
        }
        let s = interpret_judge(&Err(HalError::Transport("down".into())));
        assert!(s.is_fail());
        assert_eq!(s.confidence, Some(0.0));
    }

    #[test]
    fn ensemble_with_transport_error() {
        let fx = parse_fixture(&json!({"responses": {
            "c.judge.0": [{"output": {"verdict": "PASS", "confidence": 0.9, "reasoning": "a"}}],
            "c.judge.1": [{"error": "transport"}],
            "c.judge.2": [{"output": {"verdict": "PASS", "confidence": 0.8, "reasoning": "b"}}],
        }}))
        .unwrap();
        let e = run_judge_ensemble(&json!("text"), "rubric", &fx, "c", EnsembleSpec { n: 3, k: 2 }, Execution::Parallel).unwrap();
        assert!(e.result.signal.is_pass());
        assert_eq!(e.result.ratio, Ratio::new(2, 3));
        assert_eq!(e.votes[1].verdict, SignalKind::Fail);
        assert!(e.calls[1].error.is_some());
    }

    #[test]
    fn single_judge_uses_binding_key() {
        let fx = parse_fixture(&json!({"responses": {
            "summarize.judge": [{"output": {"verdict": "PASS", "confidence": 0.75, "reasoning": "thin"}, "confidence": 0.75}]
        }}))
        .unwrap();
        let (s, rec) = run_judge_check(&json!({"summary": "x"}), "be faithful", &fx, "summarize.judge");
        assert_eq!(s.confidence, Some(0.75));
        assert_eq!(rec.key, "summarize.judge");
    }
}
