//! Golden-dataset evaluation: runs a constitution once per case, judges the
//! result by the case's mode and gates the report against a baseline.

mod gate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::acf::validate_schema;
use crate::canonical::{digest_value, to_canonical};
use crate::graph::Constitution;
use crate::hal::load_fixture;
use crate::kernel::{Kernel, RunConfig, RunOutcome};
use crate::parallel::Execution;
use crate::state::{EventKind, HaltReason};
use crate::verify::run_judge_check;

pub use gate::{gate_regression, load_baseline, write_baseline, Baseline, GateDecision, GateThresholds, GateVerdict};

/// Backend key used for rubric-mode judging.
pub const EVAL_JUDGE_KEY: &str = "eval.judge";

#[derive(Debug, Error)]
pub enum EdlcError {
    #[error("dataset: {0}")]
    DatasetParse(String),
    #[error("baseline: {0}")]
    BaselineParse(String),
    #[error("baseline {0} already exists (use force to overwrite)")]
    BaselineExists(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(alias = "output")]
    Output,
    #[serde(alias = "rubric")]
    Rubric,
    #[serde(alias = "guardrails")]
    Guardrails,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Output => "Output",
            Mode::Rubric => "Rubric",
            Mode::Guardrails => "Guardrails",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Schema,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guardrails {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forbidden_instruction_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub required_instruction_types: Vec<String>,
    #[serde(default)]
    pub must_complete: bool,
}

/// One golden case. Which optional fields are set depends on `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenCase {
    pub id: String,
    pub mode: Mode,
    pub input: Map<String, Value>,
    /// Fixture for this case, relative to the dataset file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Value>,
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub match_kind: Option<MatchKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Guardrails>,
}

impl GoldenCase {
    fn check_fields(&self) -> Result<(), String> {
        let id = &self.id;
        let output = self.expected.is_some() || self.match_kind.is_some();
        let rubric = self.rubric_ref.is_some() || self.min_confidence.is_some();
        let guard = self.constraints.is_some();
        let (own, others) = match self.mode {
            Mode::Output => (self.expected.is_some(), rubric || guard),
            Mode::Rubric => (self.rubric_ref.is_some() && self.min_confidence.is_some(), output || guard),
            Mode::Guardrails => (guard, output || rubric),
        };
        if !own {
            return Err(format!("case `{id}`: missing fields for {} mode", self.mode));
        }
        if others {
            return Err(format!("case `{id}`: fields of another mode present in a {} case", self.mode));
        }
        if let Some(p) = self.min_confidence {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("case `{id}`: min_confidence must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// A parsed dataset plus the directory its relative fixture paths resolve
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenDataset {
    pub cases: Vec<GoldenCase>,
    pub base_dir: PathBuf,
}

impl GoldenDataset {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, EdlcError> {
        let cases: Vec<GoldenCase> = serde_yaml::from_str(text).map_err(|e| EdlcError::DatasetParse(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for c in &cases {
            c.check_fields().map_err(EdlcError::DatasetParse)?;
            if !seen.insert(c.id.as_str()) {
                return Err(EdlcError::DatasetParse(format!("duplicate case id `{}`", c.id)));
            }
        }
        Ok(GoldenDataset { cases, base_dir: base_dir.to_path_buf() })
    }

    pub fn load(path: &Path) -> Result<Self, EdlcError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EdlcError::DatasetParse(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// `passes` out of `total`, serialized as `"passes/total"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Rate {
    pub passes: u64,
    pub total: u64,
}

impl Rate {
    /// Exact value; `None` for an empty set.
    pub fn ratio(self) -> Option<Ratio<u64>> {
        (self.total > 0).then(|| Ratio::new(self.passes, self.total))
    }

    fn record(&mut self, pass: bool) {
        self.total += 1;
        self.passes += u64::from(pass);
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.passes, self.total)
    }
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bad = || serde::de::Error::custom(format!("rate `{s}` is not `passes/total`"));
        let (p, t) = s.split_once('/').ok_or_else(bad)?;
        let (passes, total) = (p.parse().map_err(|_| bad())?, t.parse().map_err(|_| bad())?);
        if passes > total {
            return Err(bad());
        }
        Ok(Rate { passes, total })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub mode: Mode,
    pub pass: bool,
    pub detail: String,
    pub tokens: u64,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt: Option<HaltReason>,
    /// Trace file name inside the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub constitution_hash: String,
    pub fixture_hash: String,
    pub cases: Vec<CaseResult>,
    pub pass_rate: Rate,
    pub pass_rate_by_mode: BTreeMap<Mode, Rate>,
    pub tokens_total: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        to_canonical(self)
    }

    pub fn case(&self, id: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.id == id)
    }

    fn assemble(constitution_hash: &str, mut cases: Vec<CaseResult>, fixture_hashes: BTreeMap<String, Option<String>>) -> Self {
        cases.sort_by(|a, b| a.id.cmp(&b.id));
        let mut pass_rate = Rate::default();
        let mut by_mode: BTreeMap<Mode, Rate> = BTreeMap::new();
        for c in &cases {
            pass_rate.record(c.pass);
            by_mode.entry(c.mode).or_default().record(c.pass);
        }
        EvalReport {
            constitution_hash: constitution_hash.to_string(),
            fixture_hash: digest_value(&serde_json::to_value(&fixture_hashes).expect("string map serializes")),
            tokens_total: cases.iter().map(|c| c.tokens).sum(),
            cases,
            pass_rate,
            pass_rate_by_mode: by_mode,
        }
    }
}

/// Where suite runs find their default fixture and put their traces.
#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Fixture for cases that do not name their own.
    pub fixture: Option<PathBuf>,
    /// Traces are written here as `<case>.trace.ndjson` when set.
    pub out_dir: Option<PathBuf>,
    pub execution: Execution,
}

/// Runs every case and assembles a report ordered by case id. Failures of
/// individual runs become failing cases.
pub fn run_golden_suite(
    constitution: &Constitution,
    dataset: &GoldenDataset,
    config: &RunConfig,
    options: &SuiteOptions,
) -> Result<EvalReport, EdlcError> {
    if constitution.policy(&config.environment).is_none() {
        return Err(EdlcError::Config(format!("no policy set for environment `{}`", config.environment)));
    }
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let config = RunConfig { interactive: false, ..config.clone() };
    let results = options.execution.map(&dataset.cases, |case| run_case(constitution, dataset, &config, options, case));
    let mut fixture_hashes = BTreeMap::new();
    let mut cases = Vec::new();
    for (case, (result, hash)) in dataset.cases.iter().zip(results) {
        fixture_hashes.insert(case.id.clone(), hash);
        cases.push(result);
    }
    Ok(EvalReport::assemble(constitution.version_hash(), cases, fixture_hashes))
}

fn failed(case: &GoldenCase, detail: String) -> CaseResult {
    CaseResult { id: case.id.clone(), mode: case.mode, pass: false, detail, tokens: 0, steps: 0, halt: None, trace: None }
}

fn run_case(
    constitution: &Constitution,
    dataset: &GoldenDataset,
    config: &RunConfig,
    options: &SuiteOptions,
    case: &GoldenCase,
) -> (CaseResult, Option<String>) {
    let fixture = case.fixture.as_ref().map(|f| dataset.base_dir.join(f)).or_else(|| options.fixture.clone());
    let Some(fixture) = fixture else {
        return (failed(case, "no fixture for case".into()), None);
    };
    let backend = match load_fixture(&fixture) {
        Ok(b) => b,
        Err(e) => return (failed(case, e.to_string()), None),
    };
    let hash = Some(backend.fixture_hash().to_string());
    let outcome = match Kernel::new(constitution, config, &backend).run(Value::Object(case.input.clone())) {
        Ok(o) => o,
        Err(e) => return (failed(case, format!("run error: {e}")), hash),
    };
    let mut trace = None;
    if let Some(dir) = &options.out_dir {
        let name = format!("{}.trace.ndjson", case.id);
        if let Err(e) = outcome.record.write(&dir.join(&name)) {
            return (failed(case, format!("could not write trace: {e}")), hash);
        }
        trace = Some(name);
    }
    let mut result = evaluate_case(case, &outcome, constitution, &backend);
    result.trace = trace;
    (result, hash)
}

/// Path of the first place `actual` differs from `expected`.
fn first_mismatch(expected: &Value, actual: &Value, path: &str) -> Option<String> {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => e
            .keys()
            .chain(a.keys().filter(|k| !e.contains_key(*k)))
            .find_map(|k| match (e.get(k), a.get(k)) {
                (Some(ev), Some(av)) => first_mismatch(ev, av, &format!("{path}.{k}")),
                _ => Some(format!("{path}.{k}")),
            }),
        (Value::Array(e), Value::Array(a)) if e.len() == a.len() => e
            .iter()
            .zip(a)
            .enumerate()
            .find_map(|(i, (ev, av))| first_mismatch(ev, av, &format!("{path}[{i}]"))),
        _ => (expected != actual).then(|| path.to_string()),
    }
}

fn rubric_text(constitution: &Constitution, reference: &str) -> Option<String> {
    constitution
        .text(reference)
        .map(str::to_string)
        .or_else(|| constitution.root().and_then(|r| std::fs::read_to_string(r.join(reference)).ok()))
}

fn halt_label(h: Option<HaltReason>) -> String {
    match h {
        Some(h) => serde_json::to_value(h).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
        None => "interrupted".into(),
    }
}

/// Judges one finished run against its case.
pub fn evaluate_case(
    case: &GoldenCase,
    outcome: &RunOutcome,
    constitution: &Constitution,
    backend: &dyn crate::hal::Backend,
) -> CaseResult {
    let used = outcome.state.os_metadata().resources();
    let mut problems: Vec<String> = Vec::new();
    match case.mode {
        Mode::Output => {
            let expected = case.expected.as_ref().expect("checked at parse time");
            match &outcome.final_output {
                None => problems.push(format!("no response produced (ended {})", halt_label(outcome.halt))),
                Some(actual) => match case.match_kind.unwrap_or(MatchKind::Exact) {
                    MatchKind::Exact => {
                        if let Some(path) = first_mismatch(expected, actual, "$") {
                            problems.push(format!("mismatch at {path}"));
                        }
                    }
                    MatchKind::Schema => match constitution.schemas().parse(expected) {
                        Ok(schema) => {
                            let report = validate_schema(actual, &schema);
                            if !report.conforms() {
                                problems.push(format!("schema mismatch: {}", report.summary()));
                            }
                        }
                        Err(e) => problems.push(format!("bad expected schema: {e}")),
                    },
                },
            }
        }
        Mode::Rubric => {
            let min = case.min_confidence.expect("checked at parse time");
            let reference = case.rubric_ref.as_deref().expect("checked at parse time");
            match (&outcome.final_output, rubric_text(constitution, reference)) {
                (None, _) => problems.push(format!("no response produced (ended {})", halt_label(outcome.halt))),
                (_, None) => problems.push(format!("rubric `{reference}` not found")),
                (Some(actual), Some(rubric)) => {
                    let (signal, _) = run_judge_check(actual, &rubric, backend, EVAL_JUDGE_KEY);
                    let p = signal.confidence.unwrap_or(0.0);
                    if signal.is_fail() {
                        problems.push(format!("judge verdict FAIL: {}", signal.reason.unwrap_or_default()));
                    } else if p < min {
                        problems.push(format!("judge confidence {p} < {min}"));
                    }
                }
            }
        }
        Mode::Guardrails => {
            let g = case.constraints.as_ref().expect("checked at parse time");
            if let Some(max) = g.max_tokens.filter(|m| used.tokens_used > *m) {
                problems.push(format!("tokens {} > {max}", used.tokens_used));
            }
            if let Some(max) = g.max_steps.filter(|m| used.steps_used > *m) {
                problems.push(format!("steps {} > {max}", used.steps_used));
            }
            let executed: BTreeSet<&str> = outcome
                .record
                .events()
                .iter()
                .filter(|e| e.kind == EventKind::Step)
                .map(|e| e.instruction_type.as_str())
                .collect();
            for t in &g.forbidden_instruction_types {
                if executed.contains(t.as_str()) {
                    problems.push(format!("forbidden instruction {t} executed"));
                }
            }
            for t in &g.required_instruction_types {
                if !executed.contains(t.as_str()) {
                    problems.push(format!("required instruction {t} not executed"));
                }
            }
            if g.must_complete && outcome.halt != Some(HaltReason::Completed) {
                problems.push(format!("run did not complete (ended {})", halt_label(outcome.halt)));
            }
        }
    }
    CaseResult {
        id: case.id.clone(),
        mode: case.mode,
        pass: problems.is_empty(),
        detail: if problems.is_empty() { "ok".into() } else { problems.join("; ") },
        tokens: used.tokens_used,
        steps: used.steps_used,
        halt: outcome.halt,
        trace: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn mismatch_paths() {
        let e = json!({"a": {"b": [1, 2]}, "c": "x"});
        assert_eq!(first_mismatch(&e, &e, "$"), None);
        assert_eq!(first_mismatch(&e, &json!({"a": {"b": [1, 3]}, "c": "x"}), "$").as_deref(), Some("$.a.b[1]"));
        assert_eq!(first_mismatch(&e, &json!({"a": {"b": [1, 2]}}), "$").as_deref(), Some("$.c"));
        assert_eq!(first_mismatch(&e, &json!({"a": {"b": [1, 2]}, "c": "x", "d": 1}), "$").as_deref(), Some("$.d"));
    }

    #[test]
    fn dataset_rejects_mixed_modes() {
        let ok = "- {id: a, mode: Output, input: {}, expected: {x: 1}}\n- {id: b, mode: Guardrails, input: {}, constraints: {must_complete: true}}";
        assert_eq!(GoldenDataset::parse(ok, Path::new(".")).unwrap().cases.len(), 2);
        let mixed = "- {id: a, mode: Output, input: {}, expected: {x: 1}, min_confidence: 0.9}";
        assert!(GoldenDataset::parse(mixed, Path::new(".")).is_err());
        let missing = "- {id: a, mode: Rubric, input: {}, rubric_ref: r.md}";
        assert!(GoldenDataset::parse(missing, Path::new(".")).is_err());
        let dup = "- {id: a, mode: Output, input: {}, expected: 1}\n- {id: a, mode: Output, input: {}, expected: 1}";
        assert!(GoldenDataset::parse(dup, Path::new(".")).is_err());
    }

    #[test]
    fn rate_round_trips_as_fraction() {
        let r = Rate { passes: 9, total: 10 };
        assert_eq!(serde_json::to_value(r).unwrap(), json!("9/10"));
        assert_eq!(serde_json::from_value::<Rate>(json!("9/10")).unwrap(), r);
        assert!(serde_json::from_value::<Rate>(json!("11/10")).is_err());
        assert_eq!(r.ratio(), Some(Ratio::new(9, 10)));
        assert_eq!(Rate::default().ratio(), None);
    }
}
