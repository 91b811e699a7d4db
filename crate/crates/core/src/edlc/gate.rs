use std::collections::BTreeMap;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{EdlcError, EvalReport, Rate};
use crate::canonical::to_canonical;

/// The gating-relevant part of a report, pinned to a constitution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    pub constitution_hash: String,
    pub cases: BTreeMap<String, bool>,
    pub pass_rate: Rate,
}

impl Baseline {
    pub fn from_report(report: &EvalReport) -> Self {
        Baseline {
            constitution_hash: report.constitution_hash.clone(),
            cases: report.cases.iter().map(|c| (c.id.clone(), c.pass)).collect(),
            pass_rate: report.pass_rate,
        }
    }
}

/// Writes the baseline for `report`. An existing file is only replaced
/// when `force` is set.
pub fn write_baseline(report: &EvalReport, path: &Path, force: bool) -> Result<Baseline, EdlcError> {
    if path.exists() && !force {
        return Err(EdlcError::BaselineExists(path.to_path_buf()));
    }
    let baseline = Baseline::from_report(report);
    std::fs::write(path, to_canonical(&baseline))?;
    Ok(baseline)
}

pub fn load_baseline(path: &Path) -> Result<Baseline, EdlcError> {
    let text = std::fs::read_to_string(path).map_err(|e| EdlcError::BaselineParse(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| EdlcError::BaselineParse(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    /// Largest tolerated fall in pass rate over baselined cases.
    pub max_pass_rate_drop: f64,
    /// Block when any baselined case went from pass to fail.
    pub newly_failing_forbidden: bool,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds { max_pass_rate_drop: 0.0, newly_failing_forbidden: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Pass,
    Block,
    NoBaseline,
}

impl GateDecision {
    pub fn blocks(self) -> bool {
        self == GateDecision::Block
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub decision: GateDecision,
    /// Pass rate drop over baselined cases, as an exact fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop: Option<String>,
    pub newly_failing: Vec<String>,
    pub reasons: Vec<String>,
    pub warnings: Vec<String>,
}

fn tolerance(x: f64) -> Ratio<i64> {
    if x <= 0.0 || !x.is_finite() {
        return Ratio::from_integer(0);
    }
    Ratio::approximate_float(x).unwrap_or_else(|| Ratio::from_integer(1))
}

/// Compares `report` with `baseline`. Only cases present in both count
/// towards the drop; cases new to the report warn but never block.
pub fn gate_regression(report: &EvalReport, baseline: Option<&Baseline>, thresholds: &GateThresholds) -> GateVerdict {
    let Some(baseline) = baseline else {
        return GateVerdict {
            decision: GateDecision::NoBaseline,
            drop: None,
            newly_failing: Vec::new(),
            reasons: Vec::new(),
            warnings: vec!["no baseline; nothing to compare against".into()],
        };
    };
    let mut warnings = Vec::new();
    if baseline.constitution_hash != report.constitution_hash {
        warnings.push("baseline from different constitution".to_string());
    }
    let (mut before, mut after) = (Rate::default(), Rate::default());
    let mut newly_failing = Vec::new();
    for case in &report.cases {
        match baseline.cases.get(&case.id) {
            Some(&was) => {
                before.record(was);
                after.record(case.pass);
                if was && !case.pass {
                    newly_failing.push(case.id.clone());
                }
            }
            None => warnings.push(format!(
                "new case `{}` is not in the baseline ({})",
                case.id,
                if case.pass { "passing" } else { "failing" }
            )),
        }
    }
    for id in baseline.cases.keys().filter(|id| report.case(id).is_none()) {
        warnings.push(format!("baselined case `{id}` is missing from the report"));
    }

    let mut reasons = Vec::new();
    let drop = match (before.ratio(), after.ratio()) {
        (Some(b), Some(a)) => {
            let signed = |r: Ratio<u64>| Ratio::new(*r.numer() as i64, *r.denom() as i64);
            let d = (signed(b) - signed(a)).max(Ratio::from_integer(0));
            if d > tolerance(thresholds.max_pass_rate_drop) {
                reasons.push(format!("pass rate fell from {before} to {after} (drop {d})"));
            }
            Some(d.to_string())
        }
        _ => None,
    };
    if thresholds.newly_failing_forbidden && !newly_failing.is_empty() {
        reasons.push(format!("newly failing: {}", newly_failing.join(", ")));
    }
    GateVerdict {
        decision: if reasons.is_empty() { GateDecision::Pass } else { GateDecision::Block },
        drop,
        newly_failing,
        reasons,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edlc::{CaseResult, Mode};

    fn report(results: &[(&str, bool)]) -> EvalReport {
        let cases = results
            .iter()
            .map(|(id, pass)| CaseResult {
                id: id.to_string(),
                mode: Mode::Guardrails,
                pass: *pass,
                detail: String::new(),
                tokens: 0,
                steps: 0,
                halt: None,
                trace: None,
            })
            .collect();
        EvalReport::assemble("h", cases, BTreeMap::new())
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i:02}")).collect()
    }

    #[test]
    fn one_case_lost_of_ten_blocks_on_rate() {
        let names = ids(10);
        let all: Vec<(&str, bool)> = names.iter().map(|s| (s.as_str(), true)).collect();
        let mut broken = all.clone();
        broken[3].1 = false;
        let base = Baseline::from_report(&report(&all));
        let t = GateThresholds { max_pass_rate_drop: 0.05, newly_failing_forbidden: false };
        let v = gate_regression(&report(&broken), Some(&base), &t);
        assert_eq!(v.decision, GateDecision::Block);
        assert_eq!(v.drop.as_deref(), Some("1/10"));
        let loose = GateThresholds { max_pass_rate_drop: 0.1, newly_failing_forbidden: false };
        assert_eq!(gate_regression(&report(&broken), Some(&base), &loose).decision, GateDecision::Pass);
    }

    #[test]
    fn identical_passes_and_new_cases_only_warn() {
        let r = report(&[("a", true), ("b", false)]);
        let base = Baseline::from_report(&r);
        assert_eq!(gate_regression(&r, Some(&base), &GateThresholds::default()).decision, GateDecision::Pass);
        let grown = report(&[("a", true), ("b", false), ("c", false)]);
        let v = gate_regression(&grown, Some(&base), &GateThresholds::default());
        assert_eq!(v.decision, GateDecision::Pass);
        assert!(v.warnings.iter().any(|w| w.contains("`c`")));
    }

    #[test]
    fn missing_baseline_and_foreign_hash() {
        let r = report(&[("a", true)]);
        assert_eq!(gate_regression(&r, None, &GateThresholds::default()).decision, GateDecision::NoBaseline);
        let mut base = Baseline::from_report(&r);
        base.constitution_hash = "other".into();
        let v = gate_regression(&r, Some(&base), &GateThresholds::default());
        assert!(v.warnings.contains(&"baseline from different constitution".to_string()));
    }

    #[test]
    fn baseline_file_round_trip_and_latch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.json");
        let r = report(&[("a", true), ("b", false)]);
        let written = write_baseline(&r, &path, false).unwrap();
        assert_eq!(load_baseline(&path).unwrap(), written);
        assert!(matches!(write_baseline(&r, &path, false), Err(EdlcError::BaselineExists(_))));
        assert!(write_baseline(&r, &path, true).is_ok());
    }
}
