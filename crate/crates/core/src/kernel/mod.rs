//! The arbiter loop: executes one instruction at a time, decides every
//! transition, enforces budgets and escalation, and handles interrupts.

mod decide;
mod step;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::acf::{validate_schema, InstructionBinding, SchemaKind, TrustClass};
use crate::canonical::digest_value;
use crate::graph::Constitution;
use crate::hal::{consumed_calls, Backend};
use crate::parallel::Execution;
use crate::policy::{PolicySet, Verdict};
use crate::state::{
    apply_event, Checkpoint, EscalationOutcome, EscalationRecord, EventKind, FlightRecord, HaltReason,
    InterruptTicket, Limits, ManagedState, PolicyDecisionRecord, RecordHeader, ResourceCounters, RoutingDecision,
    Signal, StateError, TraceEvent, REDACTED_KEY,
};
use crate::verify::EscalationAction;

pub use decide::{apply_escalation, enforce_budget, BudgetCounter};
use decide::Router;
use step::{Forced, StepOutcome};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("no policy set for environment `{0}`")]
    UnknownEnvironment(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("patch rejected: {0}")]
    PatchRejected(String),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Default escalation applied to bindings that do not set their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationDefaults {
    pub threshold: f64,
    /// Validator to re-check with; interrupt when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_check: Option<String>,
}

impl Default for EscalationDefaults {
    fn default() -> Self {
        EscalationDefaults { threshold: 0.8, run_check: None }
    }
}

impl EscalationDefaults {
    pub fn action(&self) -> EscalationAction {
        match &self.run_check {
            Some(r) => EscalationAction::RunCheck(r.clone()),
            None => EscalationAction::Interrupt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub environment: String,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub interactive: bool,
    #[serde(default)]
    pub escalation: EscalationDefaults,
}

impl RunConfig {
    pub fn new(environment: impl Into<String>) -> Self {
        RunConfig {
            environment: environment.into(),
            limits: Limits::default(),
            interactive: false,
            escalation: EscalationDefaults::default(),
        }
    }

    /// Config for the package's default environment.
    pub fn for_constitution(c: &Constitution) -> Result<Self, KernelError> {
        c.default_environment()
            .map(RunConfig::new)
            .ok_or_else(|| KernelError::InvalidConfig("package defines several environments; pick one".into()))
    }

    fn validate(&self) -> Result<(), KernelError> {
        let l = &self.limits;
        if l.max_tokens == 0 || l.max_steps == 0 || l.max_cost_units.is_nan() || l.max_cost_units <= 0.0 {
            return Err(KernelError::InvalidConfig("limits must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.escalation.threshold) {
            return Err(KernelError::InvalidConfig("escalation threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Where a run puts its side files.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoints for interrupts are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Sub-run traces are written here when set.
    pub artifacts_dir: Option<PathBuf>,
    /// Copied into every checkpoint so a resume can find its inputs.
    pub session: BTreeMap<String, String>,
    pub execution: Execution,
}

/// A reviewer's answer to an interrupt.
#[derive(Debug, Clone, PartialEq)]
pub enum ResumeDecision {
    Approve,
    Reject,
    Edit(Map<String, Value>),
}

impl ResumeDecision {
    pub fn from_document(doc: &Value) -> Result<Self, String> {
        match doc.get("decision").and_then(Value::as_str) {
            Some("approve") => Ok(ResumeDecision::Approve),
            Some("reject") => Ok(ResumeDecision::Reject),
            Some("edit") => match doc.get("patch") {
                Some(Value::Object(m)) => Ok(ResumeDecision::Edit(m.clone())),
                _ => Err("edit decision needs a `patch` mapping".into()),
            },
            _ => Err("decision must be approve, reject or edit".into()),
        }
    }

    pub fn to_document(&self) -> Value {
        match self {
            ResumeDecision::Approve => json!({"decision": "approve"}),
            ResumeDecision::Reject => json!({"decision": "reject"}),
            ResumeDecision::Edit(p) => json!({"decision": "edit", "patch": p}),
        }
    }
}

/// How a run (or a resumed segment of one) ended.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: FlightRecord,
    pub state: ManagedState,
    pub halt: Option<HaltReason>,
    pub interrupt: Option<InterruptTicket>,
    pub checkpoint: Option<Checkpoint>,
    /// Payload of the last RESPOND step.
    pub final_output: Option<Value>,
}

impl RunOutcome {
    pub fn completed(&self) -> bool {
        self.halt == Some(HaltReason::Completed)
    }
}

struct Deferred {
    node_id: String,
    binding_id: String,
    value: Value,
}

struct Run {
    state: ManagedState,
    record: FlightRecord,
    deferred: Vec<Deferred>,
    final_output: Option<Value>,
}

/// Runs a constitution. The only ways to execute steps are `run` and
/// `resume`; both go through the same arbiter.
pub struct Kernel<'a> {
    constitution: &'a Constitution,
    config: &'a RunConfig,
    backend: &'a dyn Backend,
    options: RunOptions,
}

fn blank_event(seq: u64, kind: EventKind, node: &str, b: &InstructionBinding) -> TraceEvent {
    TraceEvent {
        seq,
        kind,
        node_id: node.to_string(),
        binding_id: b.id.clone(),
        instruction_type: b.instruction_type.name.clone(),
        core: b.instruction_type.core.name().to_string(),
        input_hash: digest_value(&Value::Null),
        output: json!({}),
        quarantined: false,
        calls: Vec::new(),
        signal: Signal::none(),
        error: None,
        escalation: None,
        resource_delta: ResourceCounters::default(),
        policy_decisions: Vec::new(),
        routing: RoutingDecision::Continue { node: node.to_string() },
        taint_updates: BTreeMap::new(),
        state_hash: String::new(),
        prev_event_hash: String::new(),
    }
}

fn redact(event: &mut TraceEvent) {
    event.output = json!({ REDACTED_KEY: digest_value(&event.output) });
    for call in &mut event.calls {
        if let Some(r) = &mut call.response {
            r.output = json!({ REDACTED_KEY: digest_value(&r.output) });
        }
    }
}

pub fn ticket_id(seq: u64) -> String {
    format!("int-{seq:04}")
}

impl<'a> Kernel<'a> {
    pub fn new(constitution: &'a Constitution, config: &'a RunConfig, backend: &'a dyn Backend) -> Self {
        Kernel { constitution, config, backend, options: RunOptions::default() }
    }

    pub fn with_options(mut self, options: &RunOptions) -> Self {
        self.options = options.clone();
        self
    }

    fn policy(&self) -> Result<&'a PolicySet, KernelError> {
        self.config.validate()?;
        self.constitution
            .policy(&self.config.environment)
            .ok_or_else(|| KernelError::UnknownEnvironment(self.config.environment.clone()))
    }

    fn router(&self, policy: &'a PolicySet) -> Router<'a> {
        Router { constitution: self.constitution, policy, limits: &self.config.limits }
    }

    fn binding(&self, node: &str) -> Result<&'a InstructionBinding, KernelError> {
        self.constitution
            .node_binding(node)
            .ok_or_else(|| KernelError::InvalidConfig(format!("node `{node}` has no binding")))
    }

    /// Starts a run from the graph entry with `initial` as user memory.
    pub fn run(&self, initial: Value) -> Result<RunOutcome, KernelError> {
        let policy = self.policy()?;
        let Value::Object(memory) = initial else {
            return Err(KernelError::InvalidConfig("initial input must be a mapping".into()));
        };
        let state = ManagedState::new(&self.config.environment, memory);
        let config = serde_json::to_value(self.config).map_err(|e| KernelError::InvalidConfig(e.to_string()))?;
        let header = RecordHeader::new(self.constitution.version_hash(), state.clone(), config);
        let mut run = Run { state, record: FlightRecord::new(header), deferred: Vec::new(), final_output: None };

        let entry = self.constitution.graph().entry.clone();
        let admission = self.router(policy).check(&run.state, &entry);
        if admission.verdict.is_some_and(|v| v != Verdict::Allow) {
            let b = self.binding(&entry)?;
            let mut event = blank_event(0, EventKind::Admission, &entry, b);
            event.policy_decisions = admission.decisions.clone();
            if admission.is_denied() {
                event.routing = RoutingDecision::halt(HaltReason::Denied, format!("entry `{entry}` denied by policy"));
                self.commit(&mut run, event, false)?;
                return self.finish(run);
            }
            self.commit(&mut run, event, false)?;
        }
        self.drive(run, entry)
    }

    /// Continues an interrupted run. `record` must be the record the
    /// checkpoint was cut from.
    pub fn resume(&self, checkpoint: &Checkpoint, record: FlightRecord, decision: ResumeDecision) -> Result<RunOutcome, KernelError> {
        let policy = self.policy()?;
        checkpoint.verify().map_err(|e| KernelError::Checkpoint(e.to_string()))?;
        checkpoint.matches_record(&record).map_err(|e| KernelError::Checkpoint(e.to_string()))?;
        if checkpoint.constitution_hash != self.constitution.version_hash() {
            return Err(KernelError::Checkpoint("checkpoint belongs to a different constitution".into()));
        }
        self.backend.fast_forward(&consumed_calls(&record));
        let ticket = checkpoint.ticket.clone();
        let b = self.binding(&ticket.node_id)?;
        let router = self.router(policy);
        let mut run = Run { state: checkpoint.state.clone(), record, deferred: Vec::new(), final_output: None };
        let mut event = blank_event(run.record.len() as u64, EventKind::Resume, &ticket.node_id, b);
        event.output = decision.to_document();
        event.signal = ticket.signal.clone();

        if decision == ResumeDecision::Reject {
            event.routing = RoutingDecision::halt(HaltReason::Denied, format!("reviewer rejected {}", ticket.id));
            self.commit(&mut run, event, false)?;
            return self.finish(run);
        }
        if let ResumeDecision::Edit(patch) = &decision {
            let (route, _) = router.route(&run.state, &ticket.node_id, &ticket.signal, &b.instruction_type.core);
            if let Some(next) = route.target().and_then(|n| self.constitution.node_binding(n)) {
                if let SchemaKind::Record { fields, .. } = &next.input_schema.kind {
                    for (k, v) in patch {
                        if let Some(f) = fields.get(k) {
                            let report = validate_schema(v, &f.schema);
                            if !report.conforms() {
                                return Err(KernelError::PatchRejected(format!("`{k}`: {}", report.summary())));
                            }
                        }
                    }
                }
            }
        }
        let mut tentative = run.state.clone();
        apply_event(&mut tentative, &event)?;
        let (routing, decisions) = router.route(&tentative, &ticket.node_id, &ticket.signal, &b.instruction_type.core);
        event.routing = routing.clone();
        event.policy_decisions = decisions;
        self.commit(&mut run, event, false)?;
        match routing.target() {
            Some(next) => self.drive(run, next.to_string()),
            None => self.finish(run),
        }
    }

    fn commit(&self, run: &mut Run, mut event: TraceEvent, redacted: bool) -> Result<(), KernelError> {
        event.prev_event_hash = run.record.chain_head().to_string();
        apply_event(&mut run.state, &event)?;
        event.state_hash = run.state.hash();
        if redacted {
            redact(&mut event);
        }
        run.record.append_event(event)?;
        Ok(())
    }

    fn taint_updates(&self, policy: &PolicySet, b: &InstructionBinding, signal: &Signal) -> BTreeMap<String, bool> {
        let mut out = BTreeMap::new();
        if policy.semantics != crate::policy::Semantics::Taint {
            return out;
        }
        let (core, ty) = (&b.instruction_type.core, &b.instruction_type.name);
        for rule in &policy.rules {
            if let crate::policy::RuleFamily::Constraint { must_precede, .. } = &rule.family {
                if rule.trigger.matches(core, ty) {
                    out.insert(rule.id.clone(), true);
                } else if must_precede.as_ref() == Some(core) && signal.is_pass() {
                    out.insert(rule.id.clone(), false);
                }
            }
        }
        out
    }

    fn drive(&self, mut run: Run, mut node: String) -> Result<RunOutcome, KernelError> {
        let policy = self.policy()?;
        let router = self.router(policy);
        loop {
            let seq = run.record.len() as u64;
            let b = self.binding(&node)?;
            let step: StepOutcome = self.execute_step(&node, b, &run.state, seq);
            let mut event = blank_event(seq, EventKind::Step, &node, b);
            event.input_hash = step.input_hash.clone();
            event.output = step.output.clone();
            event.quarantined = step.quarantined;
            event.calls = step.calls.clone();
            event.signal = step.signal.clone();
            event.error = step.error.clone();
            event.resource_delta = step.delta;
            event.taint_updates = self.taint_updates(policy, b, &step.signal);

            let mut tentative = run.state.clone();
            apply_event(&mut tentative, &event)?;
            let terminal_ok = b.instruction_type.trust == TrustClass::Terminal && !step.signal.is_fail();
            let mut interrupt: Option<(String, Signal)> = None;
            let routing = if let Some(forced) = &step.forced {
                match forced {
                    Forced::Interrupt(reason) => {
                        interrupt = Some((reason.clone(), step.signal.clone()));
                        None
                    }
                    Forced::Halt(reason, detail) => Some(RoutingDecision::halt(*reason, detail.clone())),
                }
            } else if let (false, Err(counter)) = (terminal_ok, enforce_budget(tentative.os_metadata().resources(), &self.config.limits)) {
                Some(RoutingDecision::halt(HaltReason::BudgetExhausted, format!("{counter} limit reached")))
            } else if step.review {
                interrupt = Some(("level 3 verification requires human review".into(), step.signal.clone()));
                None
            } else {
                let v = b.verification.as_ref();
                let threshold = v.and_then(|v| v.threshold).unwrap_or(self.config.escalation.threshold);
                let action = v.and_then(|v| v.escalation_action.clone()).unwrap_or_else(|| self.config.escalation.action());
                let outcome = apply_escalation(&step.signal, threshold, &action, self.constitution.validators(), &step.checked);
                let mut signal = step.signal.clone();
                match &outcome {
                    EscalationOutcome::Accept => {}
                    EscalationOutcome::RunCheck { signal: s, .. } => {
                        if s.is_pass() && step.verification_failed {
                            event.quarantined = false;
                        }
                        if s.is_fail() && !event.quarantined && b.verification.is_some() {
                            event.quarantined = true;
                        }
                        signal = s.clone();
                    }
                    EscalationOutcome::Interrupt { reason } => interrupt = Some((reason.clone(), step.signal.clone())),
                }
                if v.is_some() || outcome != EscalationOutcome::Accept {
                    event.escalation = Some(EscalationRecord { confidence: step.signal.confidence, threshold, outcome });
                }
                if interrupt.is_some() {
                    None
                } else {
                    tentative = run.state.clone();
                    apply_event(&mut tentative, &event)?;
                    let (routing, decisions) = router.route(&tentative, &node, &signal, &b.instruction_type.core);
                    event.policy_decisions = decisions;
                    Some(routing)
                }
            };
            let routing = match (routing, interrupt) {
                (Some(r), _) => r,
                (None, Some((reason, signal))) => {
                    let id = ticket_id(seq);
                    RoutingDecision::Interrupt {
                        ticket: InterruptTicket {
                            checkpoint: Checkpoint::file_name(&id),
                            id,
                            seq,
                            node_id: node.clone(),
                            binding_id: b.id.clone(),
                            reason,
                            signal,
                        },
                    }
                }
                (None, None) => unreachable!("every branch yields a routing or an interrupt"),
            };
            event.routing = routing.clone();
            if let Some(value) = step.deferred.clone() {
                run.deferred.push(Deferred { node_id: node.clone(), binding_id: b.id.clone(), value });
            }
            if step.final_output.is_some() && !event.quarantined {
                run.final_output = step.final_output.clone();
            }
            self.commit(&mut run, event, b.redact)?;
            match routing.target() {
                Some(next) => node = next.to_string(),
                None => return self.finish(run),
            }
        }
    }

    /// Runs queued async checks, then packages the outcome (writing a
    /// checkpoint if the run is interrupted).
    fn finish(&self, mut run: Run) -> Result<RunOutcome, KernelError> {
        let last = run.record.events().last().map(|e| e.routing.clone());
        let queued = std::mem::take(&mut run.deferred);
        for d in queued {
            let b = self.constitution.binding(&d.binding_id).expect("queued checks come from loaded bindings");
            let Some(v) = &b.verification else { continue };
            let (signal, calls) = self.run_verification(b, v, &d.value);
            let mut event = blank_event(run.record.len() as u64, EventKind::DeferredCheck, &d.node_id, b);
            event.input_hash = digest_value(&d.value);
            for r in calls.iter().filter_map(|c| c.response.as_ref()) {
                event.resource_delta.tokens_used += r.tokens_used;
                event.resource_delta.cost_units += r.cost_units;
            }
            event.calls = calls;
            let (verdict, message) = if signal.is_fail() {
                let why = signal.reason.clone().unwrap_or_else(|| "async check failed".into());
                event.error = Some(why.clone());
                (Verdict::Warn, Some(why))
            } else {
                (Verdict::Allow, None)
            };
            event.policy_decisions = vec![PolicyDecisionRecord { rule_id: "async_check".into(), decision: verdict, target: b.id.clone(), message }];
            event.signal = signal;
            event.routing = last.clone().unwrap_or_else(|| RoutingDecision::halt(HaltReason::Completed, None));
            self.commit(&mut run, event, false)?;
        }

        let routing = run.record.final_routing().cloned();
        let (halt, interrupt) = match &routing {
            Some(RoutingDecision::Halt { reason, .. }) => (Some(*reason), None),
            Some(RoutingDecision::Interrupt { ticket }) => (None, Some(ticket.clone())),
            _ => (None, None),
        };
        let checkpoint = match &interrupt {
            Some(ticket) => {
                let ckpt = Checkpoint {
                    constitution_hash: self.constitution.version_hash().to_string(),
                    state: run.state.clone(),
                    state_hash: run.state.hash(),
                    record_position: run.record.len() as u64,
                    chain_head: run.record.chain_head().to_string(),
                    ticket: ticket.clone(),
                    config: run.record.header().config.clone(),
                    session: self.options.session.clone(),
                };
                if let Some(dir) = &self.options.checkpoint_dir {
                    ckpt.save(&dir.join(&ticket.checkpoint))?;
                }
                Some(ckpt)
            }
            None => None,
        };
        Ok(RunOutcome { record: run.record, state: run.state, halt, interrupt, checkpoint, final_output: run.final_output })
    }
}

/// Runs `constitution` from its entry with default options.
pub fn run_agent(
    constitution: &Constitution,
    config: &RunConfig,
    backend: &dyn Backend,
    initial: Value,
) -> Result<RunOutcome, KernelError> {
    Kernel::new(constitution, config, backend).run(initial)
}
