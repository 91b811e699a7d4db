use std::collections::BTreeMap;

use regex::Regex;
use serde::Serialize;
use serde_json::Value;

use super::VerifyError;
use crate::acf::{validate_schema, SchemaRegistry};
use crate::state::Signal;

/// One rule of a CONSTRAIN rule set.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintRule {
    Validator { name: String, validator_ref: String },
    ForbiddenTerms { name: String, terms: Vec<String> },
}

impl ConstraintRule {
    pub fn name(&self) -> &str {
        match self {
            ConstraintRule::Validator { name, .. } | ConstraintRule::ForbiddenTerms { name, .. } => name,
        }
    }

    fn from_document(doc: &Value) -> Result<Self, String> {
        let m = doc.as_object().ok_or("constraint rule must be a mapping")?;
        let name = m.get("name").and_then(Value::as_str).ok_or("constraint rule needs `name`")?.to_string();
        if let Some(k) = m.keys().find(|k| !["name", "validator_ref", "forbidden_terms"].contains(&k.as_str())) {
            return Err(format!("constraint `{name}`: unknown key `{k}`"));
        }
        match (m.get("validator_ref"), m.get("forbidden_terms")) {
            (Some(Value::String(r)), None) => Ok(ConstraintRule::Validator { name, validator_ref: r.clone() }),
            (None, Some(Value::Array(terms))) => {
                let terms = terms
                    .iter()
                    .map(|t| t.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| format!("constraint `{name}`: forbidden_terms must be strings"))?;
                Ok(ConstraintRule::ForbiddenTerms { name, terms })
            }
            _ => Err(format!("constraint `{name}` needs exactly one of validator_ref or forbidden_terms")),
        }
    }
}

/// Outcome of one constraint rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintFinding {
    pub rule: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone)]
enum Builtin {
    JsonWellformed(Option<String>),
    Schema(String),
    Regex { field: String, pattern: Regex },
    Range { field: String, min: f64, max: f64 },
    NonEmpty(String),
}

/// A resolved validator, ready to run.
#[derive(Debug, Clone)]
pub struct Validator(Kind);

#[derive(Debug, Clone)]
enum Kind {
    Builtin(Builtin),
    Constraints(Vec<ConstraintRule>),
}

#[derive(Debug, Clone, PartialEq)]
enum Alias {
    Ref(String),
    Constraints(Vec<ConstraintRule>),
}

/// Deterministic validators: the built-ins plus package-defined aliases.
#[derive(Debug, Clone, Default)]
pub struct ValidatorRegistry {
    schemas: SchemaRegistry,
    aliases: BTreeMap<String, Alias>,
}

fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(value, |v, p| v.get(p))
}

fn parse_builtin(name: &str) -> Result<Option<Builtin>, String> {
    let (head, arg) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    let need = |what: &str| arg.filter(|a| !a.is_empty()).ok_or_else(|| format!("`{head}` needs {what}"));
    Ok(Some(match head {
        "json_wellformed" => Builtin::JsonWellformed(arg.filter(|a| !a.is_empty()).map(str::to_string)),
        "schema" => Builtin::Schema(need("a schema name")?.to_string()),
        "regex" => {
            let (field, pat) = need("`<field>:<pattern>`")?.split_once(':').ok_or("regex validator is `regex:<field>:<pattern>`")?;
            let pattern = Regex::new(pat).map_err(|e| format!("bad pattern: {e}"))?;
            Builtin::Regex { field: field.to_string(), pattern }
        }
        "range" => {
            let parts: Vec<&str> = need("`<field>,<min>,<max>`")?.split(',').map(str::trim).collect();
            let [field, min, max] = parts[..] else { return Err("range validator is `range:<field>,<min>,<max>`".into()) };
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("range bound `{s}` is not a number"));
            let (min, max) = (num(min)?, num(max)?);
            if min > max {
                return Err("range minimum exceeds maximum".into());
            }
            Builtin::Range { field: field.to_string(), min, max }
        }
        "nonempty" => Builtin::NonEmpty(need("a field")?.to_string()),
        _ => return Ok(None),
    }))
}

fn deterministic(pass: bool, reason: impl FnOnce() -> String) -> Signal {
    if pass {
        Signal::pass().with_confidence(1.0)
    } else {
        Signal::fail(reason()).with_confidence(1.0)
    }
}

fn strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.to_lowercase()),
        Value::Array(xs) => xs.iter().for_each(|x| strings(x, out)),
        Value::Object(m) => m.values().for_each(|x| strings(x, out)),
        _ => {}
    }
}

const MAX_ALIAS_DEPTH: usize = 8;

impl ValidatorRegistry {
    pub fn new(schemas: SchemaRegistry) -> Self {
        ValidatorRegistry { schemas, aliases: BTreeMap::new() }
    }

    /// Reads `validators.yaml`: a mapping (optionally under `validators`)
    /// from alias to a validator reference or to `{constraints: [...]}`.
    pub fn from_document(doc: &Value, schemas: SchemaRegistry) -> Result<Self, VerifyError> {
        let invalid = |m: String| VerifyError::InvalidConfig(m);
        let map = match doc.get("validators") {
            Some(inner) if doc.as_object().is_some_and(|m| m.len() == 1) => inner,
            _ => doc,
        };
        let map = map.as_object().ok_or_else(|| invalid("validators file must be a mapping".into()))?;
        let mut reg = ValidatorRegistry::new(schemas);
        for (alias, target) in map {
            let entry = match target {
                Value::String(r) => Alias::Ref(r.clone()),
                Value::Object(m) if m.len() == 1 && m.contains_key("constraints") => {
                    let rules = m["constraints"].as_array().ok_or_else(|| invalid(format!("`{alias}`: constraints must be a list")))?;
                    Alias::Constraints(
                        rules
                            .iter()
                            .map(ConstraintRule::from_document)
                            .collect::<Result<_, _>>()
                            .map_err(|e| invalid(format!("`{alias}`: {e}")))?,
                    )
                }
                _ => return Err(invalid(format!("`{alias}` must map to a validator name or {{constraints: [...]}}"))),
            };
            reg.aliases.insert(alias.clone(), entry);
        }
        for alias in reg.aliases.keys() {
            reg.resolve(alias)?;
        }
        Ok(reg)
    }

    pub fn aliases(&self) -> impl Iterator<Item = &str> {
        self.aliases.keys().map(String::as_str)
    }

    pub fn resolve(&self, name: &str) -> Result<Validator, VerifyError> {
        self.resolve_at(name, 0)
    }

    fn resolve_at(&self, name: &str, depth: usize) -> Result<Validator, VerifyError> {
        if depth > MAX_ALIAS_DEPTH {
            return Err(VerifyError::InvalidConfig(format!("validator alias cycle at `{name}`")));
        }
        match self.aliases.get(name) {
            Some(Alias::Ref(r)) => self.resolve_at(r, depth + 1),
            Some(Alias::Constraints(rules)) => {
                for rule in rules {
                    if let ConstraintRule::Validator { validator_ref, .. } = rule {
                        self.resolve_at(validator_ref, depth + 1)?;
                    }
                }
                Ok(Validator(Kind::Constraints(rules.clone())))
            }
            None => match parse_builtin(name) {
                Ok(Some(Builtin::Schema(s))) if self.schemas.get(&s).is_none() => {
                    Err(VerifyError::UnknownValidator(format!("{name} (no schema `{s}`)")))
                }
                Ok(Some(b)) => Ok(Validator(Kind::Builtin(b))),
                Ok(None) => Err(VerifyError::UnknownValidator(name.to_string())),
                Err(e) => Err(VerifyError::InvalidConfig(format!("{name}: {e}"))),
            },
        }
    }

    /// Runs a validator; PASS and FAIL both carry confidence 1.0.
    pub fn run(&self, validator: &Validator, value: &Value) -> Signal {
        match &validator.0 {
            Kind::Builtin(b) => self.run_builtin(b, value),
            Kind::Constraints(rules) => self.apply_constraints(value, rules).0,
        }
    }

    fn run_builtin(&self, b: &Builtin, value: &Value) -> Signal {
        let field = |f: &str| lookup(value, f).filter(|v| !v.is_null());
        match b {
            Builtin::JsonWellformed(f) => {
                let target = match f {
                    Some(f) => field(f),
                    None => Some(value).filter(|v| !v.is_null()),
                };
                let ok = match target {
                    Some(Value::String(s)) => serde_json::from_str::<Value>(s).is_ok(),
                    Some(_) => true,
                    None => false,
                };
                deterministic(ok, || "Invalid JSON".into())
            }
            Builtin::Schema(name) => match self.schemas.get(name) {
                Some(schema) => {
                    let report = validate_schema(value, schema);
                    deterministic(report.conforms(), || format!("schema `{name}`: {}", report.summary()))
                }
                None => Signal::fail(format!("unknown schema `{name}`")).with_confidence(1.0),
            },
            Builtin::Regex { field: f, pattern } => match field(f) {
                Some(Value::String(s)) => {
                    deterministic(pattern.is_match(s), || format!("`{f}` does not match /{}/", pattern.as_str()))
                }
                Some(_) => Signal::fail(format!("`{f}` is not a string")).with_confidence(1.0),
                None => Signal::fail(format!("missing field `{f}`")).with_confidence(1.0),
            },
            Builtin::Range { field: f, min, max } => match field(f).and_then(Value::as_f64) {
                Some(x) => deterministic(x >= *min && x <= *max, || format!("`{f}` = {x} outside [{min}, {max}]")),
                None => Signal::fail(format!("`{f}` is missing or not a number")).with_confidence(1.0),
            },
            Builtin::NonEmpty(f) => {
                let ok = match field(f) {
                    Some(Value::String(s)) => !s.trim().is_empty(),
                    Some(Value::Array(a)) => !a.is_empty(),
                    Some(Value::Object(m)) => !m.is_empty(),
                    Some(_) => true,
                    None => false,
                };
                deterministic(ok, || format!("`{f}` is empty"))
            }
        }
    }

    /// Applies every rule and reports each outcome. FAIL if any rule fails.
    pub fn apply_constraints(&self, value: &Value, rules: &[ConstraintRule]) -> (Signal, Vec<ConstraintFinding>) {
        let mut texts = Vec::new();
        strings(value, &mut texts);
        let findings: Vec<ConstraintFinding> = rules
            .iter()
            .map(|rule| {
                let failure = match rule {
                    ConstraintRule::Validator { validator_ref, .. } => match self.resolve(validator_ref) {
                        Ok(v) => {
                            let s = self.run(&v, value);
                            s.is_fail().then(|| s.reason.unwrap_or_else(|| format!("{validator_ref} failed")))
                        }
                        Err(e) => Some(e.to_string()),
                    },
                    ConstraintRule::ForbiddenTerms { terms, .. } => {
                        let hits: Vec<&str> = terms
                            .iter()
                            .filter(|t| texts.iter().any(|s| s.contains(&t.to_lowercase())))
                            .map(String::as_str)
                            .collect();
                        (!hits.is_empty()).then(|| format!("forbidden term(s): {}", hits.join(", ")))
                    }
                };
                ConstraintFinding { rule: rule.name().to_string(), passed: failure.is_none(), message: failure }
            })
            .collect();
        let failed: Vec<&str> = findings.iter().filter(|f| !f.passed).map(|f| f.rule.as_str()).collect();
        let signal = deterministic(failed.is_empty(), || format!("constraint(s) violated: {}", failed.join(", ")));
        (signal, findings)
    }
}

/// Runs a named validator against `value`.
pub fn run_deterministic_check(registry: &ValidatorRegistry, value: &Value, validator_ref: &str) -> Result<Signal, VerifyError> {
    let v = registry.resolve(validator_ref)?;
    Ok(registry.run(&v, value))
}

/// Applies CONSTRAIN rules using only the built-in validators.
pub fn apply_constraints(value: &Value, rules: &[ConstraintRule]) -> (Signal, Vec<ConstraintFinding>) {
    ValidatorRegistry::default().apply_constraints(value, rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acf::SchemaSpec;
    use crate::state::SignalKind;
    use serde_json::json;

    fn check(name: &str, v: Value) -> Signal {
        run_deterministic_check(&ValidatorRegistry::default(), &v, name).unwrap()
    }

    #[test]
    fn json_wellformed_rejects_outage_page() {
        let s = check("json_wellformed", json!("<html>503 Service Unavailable</html>"));
        assert_eq!(s.kind, SignalKind::Fail);
        assert_eq!(s.reason.as_deref(), Some("Invalid JSON"));
        assert!(check("json_wellformed", json!("{\"a\":1}")).is_pass());
        assert!(check("json_wellformed:api_response", json!({"api_response": "<html>503</html>"})).is_fail());
        assert!(check("json_wellformed:api_response", json!({})).is_fail());
    }

    #[test]
    fn range_regex_nonempty() {
        assert!(check("range:score,0,1", json!({"score": 1.2})).is_fail());
        assert!(check("range:score,0,1", json!({"score": 0.4})).is_pass());
        assert!(check("regex:id:^[A-Z]{3}$", json!({"id": "ABC"})).is_pass());
        assert!(check("regex:id:^[A-Z]{3}$", json!({"id": "abc"})).is_fail());
        assert!(check("nonempty:summary", json!({"summary": " "})).is_fail());
        assert!(check("nonempty:summary", json!({"summary": "ok"})).is_pass());
    }

    #[test]
    fn unknown_and_malformed_refs() {
        let r = ValidatorRegistry::default();
        assert!(matches!(r.resolve("telepathy"), Err(VerifyError::UnknownValidator(_))));
        assert!(matches!(r.resolve("range:x,1"), Err(VerifyError::InvalidConfig(_))));
        assert!(matches!(r.resolve("schema:Nope"), Err(VerifyError::UnknownValidator(_))));
    }

    #[test]
    fn schema_validator_uses_registry() {
        let mut schemas = SchemaRegistry::new();
        schemas.insert("Score", SchemaSpec::record([("score", SchemaSpec::number())]));
        let reg = ValidatorRegistry::new(schemas);
        assert!(run_deterministic_check(&reg, &json!({"score": 1}), "schema:Score").unwrap().is_pass());
        assert!(run_deterministic_check(&reg, &json!({}), "schema:Score").unwrap().is_fail());
    }

    #[test]
    fn constraints() {
        let terms = ConstraintRule::ForbiddenTerms { name: "no_promises".into(), terms: vec!["guarantee".into()] };
        let (s, f) = apply_constraints(&json!({"text": "We GUARANTEE returns"}), std::slice::from_ref(&terms));
        assert!(s.is_fail());
        assert!(!f[0].passed);
        assert!(apply_constraints(&json!({"text": "x"}), &[]).0.is_pass());
        let mixed = [
            terms,
            ConstraintRule::Validator { name: "has_text".into(), validator_ref: "nonempty:text".into() },
            ConstraintRule::Validator { name: "score".into(), validator_ref: "range:score,0,1".into() },
        ];
        let (s, f) = apply_constraints(&json!({"text": "fine", "score": 3}), &mixed);
        assert!(s.is_fail());
        assert_eq!(f.iter().filter(|f| !f.passed).count(), 1);
    }

    #[test]
    fn aliases_resolve_and_cycles_fail() {
        let reg = ValidatorRegistry::from_document(
            &json!({"validators": {"validators.is_valid_json_response": "json_wellformed:api_response",
                                   "policy.tone": {"constraints": [{"name": "t", "forbidden_terms": ["guarantee"]}]}}}),
            SchemaRegistry::new(),
        )
        .unwrap();
        let s = run_deterministic_check(&reg, &json!({"api_response": "<html/>"}), "validators.is_valid_json_response").unwrap();
        assert_eq!(s.reason.as_deref(), Some("Invalid JSON"));
        assert!(run_deterministic_check(&reg, &json!("a guarantee"), "policy.tone").unwrap().is_fail());
        assert!(ValidatorRegistry::from_document(&json!({"a": "b", "b": "a"}), SchemaRegistry::new()).is_err());
    }
}
