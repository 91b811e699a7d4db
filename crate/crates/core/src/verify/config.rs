use serde_json::{json, Map, Value};

/// What to do when a signal's confidence falls below the threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EscalationAction {
    /// Re-check with a deterministic validator whose verdict replaces the signal.
    RunCheck(String),
    Interrupt,
}

impl EscalationAction {
    pub fn from_document(doc: &Value) -> Result<Self, String> {
        match doc {
            Value::String(s) if s.eq_ignore_ascii_case("interrupt") => Ok(EscalationAction::Interrupt),
            Value::Object(m) if m.len() == 1 => match m.get("run_check").and_then(Value::as_str) {
                Some(r) if !r.is_empty() => Ok(EscalationAction::RunCheck(r.to_string())),
                _ => Err("`run_check` must name a validator".into()),
            },
            _ => Err("escalation_action must be `interrupt` or {run_check: <validator>}".into()),
        }
    }

    pub fn to_document(&self) -> Value {
        match self {
            EscalationAction::Interrupt => json!("interrupt"),
            EscalationAction::RunCheck(r) => json!({ "run_check": r }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub n: u32,
    pub k: u32,
}

/// Per-binding verification settings: level 1 is a judge (optionally an
/// ensemble), level 2 a deterministic validator, level 3 human review.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationConfig {
    pub level: u8,
    pub validator_ref: Option<String>,
    pub rubric: Option<String>,
    pub ensemble: Option<EnsembleSpec>,
    pub threshold: Option<f64>,
    pub escalation_action: Option<EscalationAction>,
}

pub const MAX_ENSEMBLE: u32 = 99;

const KEYS: [&str; 6] = ["level", "validator_ref", "rubric", "ensemble", "threshold", "escalation_action"];

fn opt_str(m: &Map<String, Value>, key: &str) -> Result<Option<String>, String> {
    match m.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if !s.is_empty() => Ok(Some(s.clone())),
        Some(_) => Err(format!("`{key}` must be a nonempty string")),
    }
}

impl VerificationConfig {
    pub fn from_document(doc: &Value) -> Result<Self, String> {
        let m = doc.as_object().ok_or("verification must be a mapping")?;
        if let Some(k) = m.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(format!("unknown verification key `{k}`"));
        }
        let level = match m.get("level").and_then(Value::as_u64) {
            Some(l @ 1..=3) => l as u8,
            _ => return Err("`level` must be 1, 2 or 3".into()),
        };
        let validator_ref = opt_str(m, "validator_ref")?;
        let rubric = opt_str(m, "rubric")?;
        let ensemble = match m.get("ensemble") {
            None | Some(Value::Null) => None,
            Some(e) => {
                let n = e.get("n").and_then(Value::as_u64).ok_or("ensemble needs integer `n`")?;
                let k = e.get("k").and_then(Value::as_u64).ok_or("ensemble needs integer `k`")?;
                if e.as_object().is_some_and(|o| o.len() != 2) {
                    return Err("ensemble takes exactly `n` and `k`".into());
                }
                if !(1..=MAX_ENSEMBLE as u64).contains(&n) || k < 1 || k > n {
                    return Err(format!("ensemble needs 1 <= k <= n <= {MAX_ENSEMBLE}, got n={n}, k={k}"));
                }
                Some(EnsembleSpec { n: n as u32, k: k as u32 })
            }
        };
        let threshold = match m.get("threshold") {
            None | Some(Value::Null) => None,
            Some(t) => match t.as_f64() {
                Some(t) if (0.0..=1.0).contains(&t) => Some(t),
                _ => return Err("`threshold` must be a number in [0, 1]".into()),
            },
        };
        let escalation_action = m.get("escalation_action").map(EscalationAction::from_document).transpose()?;
        match level {
            1 if rubric.is_none() => return Err("level 1 verification requires `rubric`".into()),
            1 if validator_ref.is_some() => return Err("level 1 verification takes a rubric, not a validator_ref".into()),
            2 if validator_ref.is_none() => return Err("level 2 verification requires `validator_ref`".into()),
            2 if rubric.is_some() || ensemble.is_some() => return Err("level 2 verification takes only a validator_ref".into()),
            3 if validator_ref.is_some() || rubric.is_some() || ensemble.is_some() || threshold.is_some() || escalation_action.is_some() => {
                return Err("level 3 verification takes no parameters".into())
            }
            _ => {}
        }
        Ok(VerificationConfig { level, validator_ref, rubric, ensemble, threshold, escalation_action })
    }

    pub fn to_document(&self) -> Value {
        let mut m = Map::new();
        m.insert("level".into(), json!(self.level));
        if let Some(v) = &self.validator_ref {
            m.insert("validator_ref".into(), json!(v));
        }
        if let Some(r) = &self.rubric {
            m.insert("rubric".into(), json!(r));
        }
        if let Some(e) = &self.ensemble {
            m.insert("ensemble".into(), json!({"n": e.n, "k": e.k}));
        }
        if let Some(t) = self.threshold {
            m.insert("threshold".into(), json!(t));
        }
        if let Some(a) = &self.escalation_action {
            m.insert("escalation_action".into(), a.to_document());
        }
        Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_requirements() {
        assert!(VerificationConfig::from_document(&json!({"level": 1, "rubric": "r.txt", "threshold": 0.8})).is_ok());
        assert!(VerificationConfig::from_document(&json!({"level": 1})).is_err());
        assert!(VerificationConfig::from_document(&json!({"level": 2})).is_err());
        assert!(VerificationConfig::from_document(&json!({"level": 3, "rubric": "r"})).is_err());
        assert!(VerificationConfig::from_document(&json!({"level": 4})).is_err());
        assert!(VerificationConfig::from_document(&json!({"level": 1, "rubric": "r", "ensemble": {"n": 3, "k": 4}})).is_err());
        assert!(VerificationConfig::from_document(&json!({"level": 1, "rubric": "r", "threshold": 1.5})).is_err());
    }

    #[test]
    fn round_trips() {
        let doc = json!({"level": 1, "rubric": "rubrics/fidelity.txt", "ensemble": {"n": 3, "k": 2}, "threshold": 0.8,
                         "escalation_action": {"run_check": "schema:Summary"}});
        let c = VerificationConfig::from_document(&doc).unwrap();
        assert_eq!(c.to_document(), doc);
        assert_eq!(c.escalation_action, Some(EscalationAction::RunCheck("schema:Summary".into())));
    }
}
