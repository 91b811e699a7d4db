use serde_json::Value;

use super::{Location, PolicyRule, PolicySet, RuleFamily, Semantics, Severity, Verdict, Violation};
use crate::acf::CoreId;
use crate::state::{Limits, ManagedState, PolicyDecisionRecord, StepContext};

/// The binding the kernel is about to run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposedStep {
    pub binding_id: String,
    pub instruction_type: String,
    pub core: CoreId,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionDecision {
    pub verdict: Option<Verdict>,
    pub decisions: Vec<PolicyDecisionRecord>,
    pub violations: Vec<Violation>,
}

impl TransitionDecision {
    pub fn verdict(&self) -> Verdict {
        self.verdict.unwrap_or(Verdict::Allow)
    }

    pub fn is_denied(&self) -> bool {
        self.verdict() == Verdict::Deny
    }
}

fn truthy(v: Option<&Value>) -> bool {
    match v {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(Value::Number(n)) => n.as_f64().is_some_and(|x| x != 0.0),
        Some(Value::String(s)) => !s.is_empty(),
        Some(Value::Array(a)) => !a.is_empty(),
        Some(Value::Object(o)) => !o.is_empty(),
    }
}

/// Fraction of the tightest limit that would be in use once the proposed step
/// starts.
pub(crate) fn projected_fraction(state: &ManagedState, limits: &Limits) -> f64 {
    let r = state.os_metadata().resources();
    let frac = |used: f64, max: f64| if max > 0.0 { used / max } else { f64::INFINITY };
    frac(r.tokens_used as f64, limits.max_tokens as f64)
        .max(frac((r.steps_used + 1) as f64, limits.max_steps as f64))
        .max(frac(r.cost_units, limits.max_cost_units))
}

/// `None` when the rule does not apply to this transition, otherwise whether
/// it is violated plus a detail for the message.
fn evaluate(
    rule: &PolicyRule,
    semantics: Semantics,
    prev: Option<&StepContext>,
    next: &ProposedStep,
    state: &ManagedState,
    limits: &Limits,
) -> Option<(bool, String)> {
    match &rule.family {
        RuleFamily::Constraint { violates_if_followed_by, .. } => {
            if &next.core != violates_if_followed_by {
                return None;
            }
            match semantics {
                Semantics::Adjacent => {
                    let hit = prev.is_some_and(|p| rule.trigger.matches(&p.core, &p.instruction_type));
                    let from = prev.map(|p| p.instruction_type.as_str()).unwrap_or("start");
                    Some((hit, format!("{from} followed by {}", next.instruction_type)))
                }
                Semantics::Taint => {
                    let hit = state.os_metadata().is_tainted(&rule.id);
                    Some((hit, format!("unchecked output reaches {}", next.instruction_type)))
                }
            }
        }
        RuleFamily::Stateful { forbid_instruction_type, when_flag } => {
            if &next.instruction_type != forbid_instruction_type || !rule.trigger.matches(&next.core, &next.instruction_type) {
                return None;
            }
            let hit = truthy(state.user_memory().get(when_flag));
            Some((hit, format!("{forbid_instruction_type} while `{when_flag}` is set")))
        }
        RuleFamily::Temporal { instruction_type, min_interval_steps } => {
            if &next.instruction_type != instruction_type || !rule.trigger.matches(&next.core, &next.instruction_type) {
                return None;
            }
            let proposed = state.os_metadata().step_seq() + 1;
            let last = state.os_metadata().last_step_of_type(instruction_type);
            let gap = last.map(|l| proposed - l);
            let hit = gap.is_some_and(|g| g < *min_interval_steps);
            let detail = match gap {
                Some(g) => format!("{instruction_type} {g} steps after the previous one (minimum {min_interval_steps})"),
                None => format!("first {instruction_type}"),
            };
            Some((hit, detail))
        }
        RuleFamily::Resource { max_budget_fraction } => {
            if !rule.trigger.matches(&next.core, &next.instruction_type) {
                return None;
            }
            let used = projected_fraction(state, limits);
            Some((used > *max_budget_fraction, format!("budget use {used:.2} against limit {max_budget_fraction:.2}")))
        }
    }
}

/// Evaluates every applicable rule for `prev -> next`. Deny dominates Warn,
/// which dominates Allow.
pub fn check_transition(
    prev: Option<&StepContext>,
    next: &ProposedStep,
    state: &ManagedState,
    limits: &Limits,
    policy: &PolicySet,
) -> TransitionDecision {
    let indices: Vec<usize> = match policy.index() {
        Some(idx) => idx.candidates(&next.core, &next.instruction_type),
        None => (0..policy.rules.len()).collect(),
    };
    let seq = state.os_metadata().step_seq().saturating_sub(1);
    let mut out = TransitionDecision::default();
    for i in indices {
        let rule = &policy.rules[i];
        let Some((hit, detail)) = evaluate(rule, policy.semantics, prev, next, state, limits) else { continue };
        let (verdict, message) = if hit {
            let message = format!("{} ({detail})", rule.description);
            let severity = rule.severity(policy.tier);
            out.violations.push(Violation {
                rule_id: rule.id.clone(),
                location: Location::RuntimeStep { seq },
                message: message.clone(),
                severity,
            });
            let v = match severity {
                Severity::Deny => Verdict::Deny,
                Severity::Warn => Verdict::Warn,
            };
            (v, Some(message))
        } else {
            (Verdict::Allow, None)
        };
        out.verdict = Some(out.verdict.map_or(verdict, |v| v.max(verdict)));
        out.decisions.push(PolicyDecisionRecord {
            rule_id: rule.id.clone(),
            decision: verdict,
            target: next.binding_id.clone(),
            message,
        });
    }
    out
}
