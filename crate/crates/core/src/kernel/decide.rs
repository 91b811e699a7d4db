use serde::Serialize;
use serde_json::Value;

use crate::acf::CoreId;
use crate::graph::{Constitution, Guard, RouteError, Successor};
use crate::policy::{check_transition, PolicySet, ProposedStep, TransitionDecision};
use crate::state::{
    EscalationOutcome, HaltReason, Limits, ManagedState, PolicyDecisionRecord, ResourceCounters, RoutingDecision, Signal,
};
use crate::verify::{EscalationAction, ValidatorRegistry};

/// Which counter ran out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetCounter {
    Tokens,
    Steps,
    Cost,
}

impl std::fmt::Display for BudgetCounter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BudgetCounter::Tokens => "tokens",
            BudgetCounter::Steps => "steps",
            BudgetCounter::Cost => "cost",
        })
    }
}

/// A counter at or above its limit exhausts the budget.
pub fn enforce_budget(used: &ResourceCounters, limits: &Limits) -> Result<(), BudgetCounter> {
    if used.tokens_used >= limits.max_tokens {
        Err(BudgetCounter::Tokens)
    } else if used.steps_used >= limits.max_steps {
        Err(BudgetCounter::Steps)
    } else if used.cost_units >= limits.max_cost_units {
        Err(BudgetCounter::Cost)
    } else {
        Ok(())
    }
}

/// Confidence-based escalation. Signals without a confidence, or at or
/// above the threshold, are accepted. A `RunCheck` whose validator cannot
/// be resolved falls back to an interrupt.
pub fn apply_escalation(
    signal: &Signal,
    threshold: f64,
    action: &EscalationAction,
    validators: &ValidatorRegistry,
    value: &Value,
) -> EscalationOutcome {
    let Some(p) = signal.confidence else { return EscalationOutcome::Accept };
    if p >= threshold {
        return EscalationOutcome::Accept;
    }
    let reason = format!("confidence {p:.2} < {threshold:.2}");
    match action {
        EscalationAction::Interrupt => EscalationOutcome::Interrupt { reason },
        EscalationAction::RunCheck(r) => match validators.resolve(r) {
            Ok(v) => EscalationOutcome::RunCheck { validator: r.clone(), signal: validators.run(&v, value) },
            Err(e) => EscalationOutcome::Interrupt { reason: format!("{reason}; escalation check unavailable: {e}") },
        },
    }
}

/// Routing for a committed step, after budget and escalation have been
/// handled: failure routing, then the policy check on the chosen successor.
pub(crate) struct Router<'a> {
    pub constitution: &'a Constitution,
    pub policy: &'a PolicySet,
    pub limits: &'a Limits,
}

impl Router<'_> {
    fn proposed(&self, node: &str) -> Option<ProposedStep> {
        let b = self.constitution.node_binding(node)?;
        Some(ProposedStep {
            binding_id: b.id.clone(),
            instruction_type: b.instruction_type.name.clone(),
            core: b.instruction_type.core.clone(),
        })
    }

    /// Checks the transition into `node` from the state's last step.
    pub fn check(&self, state: &ManagedState, node: &str) -> TransitionDecision {
        match self.proposed(node) {
            Some(next) => check_transition(state.os_metadata().last_step(), &next, state, self.limits, self.policy),
            None => TransitionDecision::default(),
        }
    }

    fn failure_route(&self, node: &str, signal: &Signal, core: &CoreId) -> RoutingDecision {
        let graph = self.constitution.graph();
        if let Some(fb) = graph.fallbacks.get(node) {
            return RoutingDecision::Fallback { node: fb.clone() };
        }
        if let Some(e) = graph.outgoing(node).find(|e| e.guard == Guard::OnFail) {
            return RoutingDecision::Continue { node: e.to.clone() };
        }
        if *core == CoreId::Metacognitive {
            if let Some(target) = graph.replan_target() {
                return RoutingDecision::Replan { node: target.to_string() };
            }
        }
        let why = signal.reason.clone().unwrap_or_else(|| "step failed".into());
        RoutingDecision::halt(HaltReason::Denied, format!("unhandled failure at `{node}`: {why}"))
    }

    /// Decides where to go from `node` given the (post-escalation) signal.
    pub fn route(
        &self,
        state: &ManagedState,
        node: &str,
        signal: &Signal,
        core: &CoreId,
    ) -> (RoutingDecision, Vec<PolicyDecisionRecord>) {
        let proposed = if signal.is_fail() {
            self.failure_route(node, signal, core)
        } else {
            match self.constitution.route(node, signal, state.user_memory()) {
                Ok(Successor::Node(n)) => RoutingDecision::Continue { node: n },
                Ok(Successor::Terminal) => RoutingDecision::halt(HaltReason::Completed, None),
                Err(RouteError::NoRoute(n)) => RoutingDecision::halt(HaltReason::NoRoute, format!("no edge out of `{n}` matches")),
                Err(e) => RoutingDecision::halt(HaltReason::Error, e.to_string()),
            }
        };
        let Some(target) = proposed.target().map(str::to_string) else { return (proposed, Vec::new()) };
        let decision = self.check(state, &target);
        let mut records = decision.decisions.clone();
        if !decision.is_denied() {
            return (proposed, records);
        }
        let denied = decision.violations.iter().map(|v| v.rule_id.as_str()).collect::<Vec<_>>().join(", ");
        if !matches!(proposed, RoutingDecision::Fallback { .. }) {
            if let Some(fb) = self.constitution.graph().fallbacks.get(node) {
                let fb_decision = self.check(state, fb);
                records.extend(fb_decision.decisions.iter().cloned());
                if !fb_decision.is_denied() {
                    return (RoutingDecision::Fallback { node: fb.clone() }, records);
                }
            }
        }
        (RoutingDecision::halt(HaltReason::Denied, format!("transition to `{target}` denied by {denied}")), records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acf::SchemaRegistry;
    use serde_json::json;

    #[test]
    fn budget_thresholds() {
        let limits = Limits { max_tokens: 1000, max_steps: 10, max_cost_units: 5.0 };
        let used = ResourceCounters { tokens_used: 1200, ..Default::default() };
        assert_eq!(enforce_budget(&used, &limits), Err(BudgetCounter::Tokens));
        assert_eq!(enforce_budget(&ResourceCounters::default(), &limits), Ok(()));
        let used = ResourceCounters { steps_used: 10, ..Default::default() };
        assert_eq!(enforce_budget(&used, &limits), Err(BudgetCounter::Steps));
    }

    #[test]
    fn escalation_outcomes() {
        let reg = ValidatorRegistry::new(SchemaRegistry::new());
        let low = Signal::pass().with_confidence(0.75);
        assert_eq!(
            apply_escalation(&low, 0.8, &EscalationAction::Interrupt, &reg, &json!({})),
            EscalationOutcome::Interrupt { reason: "confidence 0.75 < 0.80".into() }
        );
        let high = Signal::pass().with_confidence(0.95);
        assert_eq!(apply_escalation(&high, 0.8, &EscalationAction::Interrupt, &reg, &json!({})), EscalationOutcome::Accept);
        let half = Signal::pass().with_confidence(0.5);
        let value = json!({"summary": "ok"});
        let out = apply_escalation(&half, 0.8, &EscalationAction::RunCheck("nonempty:summary".into()), &reg, &value);
        let direct = crate::verify::run_deterministic_check(&reg, &value, "nonempty:summary").unwrap();
        assert_eq!(out, EscalationOutcome::RunCheck { validator: "nonempty:summary".into(), signal: direct.clone() });
        assert!(direct.is_pass());
        assert_eq!(direct.confidence, Some(1.0));
        let missing = apply_escalation(&half, 0.8, &EscalationAction::RunCheck("nope".into()), &reg, &value);
        assert!(matches!(missing, EscalationOutcome::Interrupt { .. }));
    }
}
