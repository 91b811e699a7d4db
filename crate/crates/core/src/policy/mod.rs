//! Declarative governance rules: parsing, static lint and runtime checks.

mod lint;
mod runtime;

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::acf::CoreId;

pub use lint::{lint_constitution, taint_findings, EdgeList};
pub use runtime::{check_transition, ProposedStep, TransitionDecision};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("policy parse error: {0}")]
pub struct PolicyParseError(pub String);

fn perr(msg: impl Into<String>) -> PolicyParseError {
    PolicyParseError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    #[default]
    Adjacent,
    Taint,
}

impl FromStr for Semantics {
    type Err = PolicyParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adjacent" => Ok(Semantics::Adjacent),
            "taint" => Ok(Semantics::Taint),
            _ => Err(perr(format!("unknown semantics `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Development,
    #[default]
    Staging,
    Production,
}

impl FromStr for Tier {
    type Err = PolicyParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "development" => Ok(Tier::Development),
            "staging" => Ok(Tier::Staging),
            "production" => Ok(Tier::Production),
            _ => Err(perr(format!("unknown tier `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    Enforce,
    Warn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Allow,
    Warn,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Warn,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_core: Option<CoreId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_type: Option<String>,
}

impl Trigger {
    pub fn matches(&self, core: &CoreId, instruction_type: &str) -> bool {
        self.instruction_core.as_ref().is_none_or(|c| c == core)
            && self.instruction_type.as_deref().is_none_or(|t| t == instruction_type)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleFamily {
    Constraint { violates_if_followed_by: CoreId, must_precede: Option<CoreId> },
    Stateful { forbid_instruction_type: String, when_flag: String },
    Temporal { instruction_type: String, min_interval_steps: u64 },
    Resource { max_budget_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRule {
    pub id: String,
    pub description: String,
    pub trigger: Trigger,
    pub family: RuleFamily,
    /// Explicit per-rule mode, if the file set one.
    pub mode: Option<RuleMode>,
}

impl PolicyRule {
    /// Severity after applying the set's tier.
    pub fn severity(&self, tier: Tier) -> Severity {
        match (tier, self.mode) {
            (Tier::Development, _) | (_, Some(RuleMode::Warn)) => Severity::Warn,
            _ => Severity::Deny,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Location {
    StaticEdge { from: String, to: String },
    RuntimeStep { seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule_id: String,
    #[serde(rename = "where")]
    pub location: Location,
    pub message: String,
    pub severity: Severity,
}

/// Rule positions keyed by the property of the *next* step that can make
/// them applicable. Built once for production sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct RuleIndex {
    by_core: BTreeMap<String, Vec<usize>>,
    by_type: BTreeMap<String, Vec<usize>>,
    any: Vec<usize>,
}

impl RuleIndex {
    fn build(rules: &[PolicyRule]) -> Self {
        let mut idx = RuleIndex::default();
        for (i, rule) in rules.iter().enumerate() {
            match &rule.family {
                RuleFamily::Constraint { violates_if_followed_by, .. } => {
                    idx.by_core.entry(violates_if_followed_by.name().to_string()).or_default().push(i)
                }
                RuleFamily::Stateful { forbid_instruction_type: t, .. }
                | RuleFamily::Temporal { instruction_type: t, .. } => idx.by_type.entry(t.clone()).or_default().push(i),
                RuleFamily::Resource { .. } => match (&rule.trigger.instruction_type, &rule.trigger.instruction_core) {
                    (Some(t), _) => idx.by_type.entry(t.clone()).or_default().push(i),
                    (None, Some(c)) => idx.by_core.entry(c.name().to_string()).or_default().push(i),
                    (None, None) => idx.any.push(i),
                },
            }
        }
        idx
    }

    pub(crate) fn candidates(&self, core: &CoreId, instruction_type: &str) -> Vec<usize> {
        let mut out: Vec<usize> = self.any.clone();
        out.extend(self.by_core.get(core.name()).into_iter().flatten());
        out.extend(self.by_type.get(instruction_type).into_iter().flatten());
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub environment: String,
    pub rules: Vec<PolicyRule>,
    pub semantics: Semantics,
    pub tier: Tier,
    index: Option<RuleIndex>,
}

impl PolicySet {
    pub fn new(environment: &str, rules: Vec<PolicyRule>, semantics: Semantics, tier: Tier) -> Result<Self, PolicyParseError> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &rules {
            if !seen.insert(r.id.as_str()) {
                return Err(perr(format!("duplicate rule id `{}`", r.id)));
            }
        }
        let index = (tier == Tier::Production).then(|| RuleIndex::build(&rules));
        Ok(PolicySet { environment: environment.to_string(), rules, semantics, tier, index })
    }

    pub fn with_semantics(&self, semantics: Semantics) -> Self {
        PolicySet { semantics, ..self.clone() }
    }

    pub fn with_tier(&self, tier: Tier) -> Self {
        let mut out = PolicySet { tier, ..self.clone() };
        out.index = (tier == Tier::Production).then(|| RuleIndex::build(&out.rules));
        out
    }

    pub fn rule(&self, id: &str) -> Option<&PolicyRule> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn is_indexed(&self) -> bool {
        self.index.is_some()
    }

    pub(crate) fn index(&self) -> Option<&RuleIndex> {
        self.index.as_ref()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSet {
    environment: String,
    #[serde(default)]
    rules: Vec<RawRule>,
    #[serde(default)]
    semantics: Option<String>,
    #[serde(default)]
    tier: Option<String>,
    #[serde(default)]
    description: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    id: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    trigger: Option<Trigger>,
    #[serde(default)]
    constraint: Option<RawConstraint>,
    #[serde(default)]
    stateful: Option<RawStateful>,
    #[serde(default)]
    temporal: Option<RawTemporal>,
    #[serde(default)]
    resource: Option<RawResource>,
    #[serde(default)]
    mode: Option<RuleMode>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraint {
    violates_if_followed_by_instruction_core: Option<CoreId>,
    #[serde(default)]
    must_precede_core: Option<CoreId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStateful {
    forbid_instruction_type: String,
    when_flag: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemporal {
    instruction_type: String,
    min_interval_steps: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResource {
    max_budget_fraction: f64,
}

fn convert_rule(raw: RawRule) -> Result<PolicyRule, PolicyParseError> {
    let id = raw.id;
    let families = [raw.constraint.is_some(), raw.stateful.is_some(), raw.temporal.is_some(), raw.resource.is_some()]
        .iter()
        .filter(|b| **b)
        .count();
    if families != 1 {
        return Err(perr(format!("rule `{id}`: one family per rule (found {families})")));
    }
    let family = if let Some(c) = raw.constraint {
        if raw.trigger.is_none() {
            return Err(perr(format!("rule `{id}`: constraint rules require a trigger")));
        }
        let target = c
            .violates_if_followed_by_instruction_core
            .ok_or_else(|| perr(format!("rule `{id}`: constraint needs violates_if_followed_by_instruction_core")))?;
        RuleFamily::Constraint { violates_if_followed_by: target, must_precede: c.must_precede_core }
    } else if let Some(s) = raw.stateful {
        RuleFamily::Stateful { forbid_instruction_type: s.forbid_instruction_type, when_flag: s.when_flag }
    } else if let Some(t) = raw.temporal {
        if t.min_interval_steps == 0 {
            return Err(perr(format!("rule `{id}`: min_interval_steps must be positive")));
        }
        RuleFamily::Temporal { instruction_type: t.instruction_type, min_interval_steps: t.min_interval_steps }
    } else {
        let f = raw.resource.expect("family count checked").max_budget_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(perr(format!("rule `{id}`: max_budget_fraction must be in (0, 1]")));
        }
        RuleFamily::Resource { max_budget_fraction: f }
    };
    Ok(PolicyRule { description: raw.description.unwrap_or_default(), trigger: raw.trigger.unwrap_or_default(), family, mode: raw.mode, id })
}

pub fn parse_policy_document(doc: &Value) -> Result<PolicySet, PolicyParseError> {
    let raw: RawSet = serde_json::from_value(doc.clone()).map_err(|e| perr(e.to_string()))?;
    let _ = raw.description;
    let semantics = raw.semantics.as_deref().map(str::parse).transpose()?.unwrap_or_default();
    let tier = raw.tier.as_deref().map(str::parse).transpose()?.unwrap_or_default();
    let rules = raw.rules.into_iter().map(convert_rule).collect::<Result<Vec<_>, _>>()?;
    PolicySet::new(&raw.environment, rules, semantics, tier)
}

/// Parses YAML (JSON is accepted as a subset).
pub fn parse_policy_set(text: &str) -> Result<PolicySet, PolicyParseError> {
    let doc: Value = serde_yaml::from_str(text).map_err(|e| perr(e.to_string()))?;
    parse_policy_document(&doc)
}

pub fn load_policy_set(path: &Path) -> Result<PolicySet, PolicyParseError> {
    let text = std::fs::read_to_string(path).map_err(|e| perr(format!("{}: {e}", path.display())))?;
    parse_policy_set(&text)
}
