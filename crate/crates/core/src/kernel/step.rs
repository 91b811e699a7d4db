use serde_json::{json, Map, Value};

use super::{Kernel, RunConfig, RunOptions};
use crate::acf::{validate_schema, InstructionBinding, SchemaKind, SchemaSpec, TrustClass};
use crate::canonical::digest_value;
use crate::hal::{render_template, BackendRequest, BackendResponse, HalError};
use crate::state::{
    CallRecord, ChildRef, HaltReason, Limits, ManagedState, ResourceCounters, RoutingDecision, Signal, SignalKind,
};
use crate::verify::{run_judge_check, run_judge_ensemble, VerificationConfig};

/// Everything one step produced, before the arbiter decides where to go.
#[derive(Debug, Clone)]
pub(crate) struct StepOutcome {
    pub input_hash: String,
    pub output: Value,
    pub quarantined: bool,
    /// Quarantine came from a failed verification rather than the schema.
    pub verification_failed: bool,
    pub calls: Vec<CallRecord>,
    pub signal: Signal,
    pub error: Option<String>,
    pub delta: ResourceCounters,
    /// Value an escalation re-check inspects.
    pub checked: Value,
    /// Level 3 verification: always goes to human review.
    pub review: bool,
    /// Routing imposed by the instruction itself.
    pub forced: Option<Forced>,
    pub deferred: Option<Value>,
    pub final_output: Option<Value>,
}

#[derive(Debug, Clone)]
pub(crate) enum Forced {
    Interrupt(String),
    Halt(HaltReason, String),
}

impl StepOutcome {
    fn new(inputs: &Value) -> Self {
        StepOutcome {
            input_hash: digest_value(inputs),
            output: json!({}),
            quarantined: false,
            verification_failed: false,
            calls: Vec::new(),
            signal: Signal::none(),
            error: None,
            delta: ResourceCounters { steps_used: 1, ..Default::default() },
            checked: Value::Null,
            review: false,
            forced: None,
            deferred: None,
            final_output: None,
        }
    }

    fn fail(&mut self, reason: &str, error: String) {
        self.signal = Signal::fail(reason);
        self.error = Some(error);
    }

    fn charge(&mut self, r: &BackendResponse) {
        self.delta.tokens_used += r.tokens_used;
        self.delta.cost_units += r.cost_units;
    }

    /// Output firewall: a nonconforming output fails the step and never
    /// reaches user memory.
    fn accept_output(&mut self, output: Value, schema: &SchemaSpec) -> bool {
        let report = validate_schema(&output, schema);
        self.output = output;
        if report.conforms() {
            true
        } else {
            self.quarantined = true;
            self.fail("schema violation", format!("schema violation: {}", report.summary()));
            false
        }
    }
}

/// Inputs a binding sees: the declared record fields present in memory, or
/// all of memory for an untyped input.
pub(crate) fn project_inputs(schema: &SchemaSpec, memory: &Map<String, Value>) -> Value {
    match &schema.kind {
        SchemaKind::Record { fields, .. } => {
            Value::Object(fields.keys().filter_map(|k| memory.get(k).map(|v| (k.clone(), v.clone()))).collect())
        }
        _ => Value::Object(memory.clone()),
    }
}

fn signal_from_value(v: &Value) -> Option<SignalKind> {
    match v {
        Value::Bool(b) => Some(if *b { SignalKind::Pass } else { SignalKind::Fail }),
        Value::String(s) => match s.to_ascii_uppercase().as_str() {
            "PASS" | "TRUE" => Some(SignalKind::Pass),
            "FAIL" | "FALSE" => Some(SignalKind::Fail),
            _ => None,
        },
        _ => None,
    }
}

/// Reads a check's verdict from its output: `signal_field`, else `verdict`,
/// else `result`, else the only boolean field.
pub(crate) fn infer_signal(output: &Value, signal_field: Option<&str>, response_confidence: Option<f64>) -> Signal {
    let Some(obj) = output.as_object() else { return Signal::none() };
    let kind = match signal_field {
        Some(f) => obj.get(f).and_then(signal_from_value),
        None => ["verdict", "result"].iter().find_map(|k| obj.get(*k).and_then(signal_from_value)).or_else(|| {
            let bools: Vec<bool> = obj.values().filter_map(Value::as_bool).collect();
            match bools[..] {
                [b] => Some(if b { SignalKind::Pass } else { SignalKind::Fail }),
                _ => None,
            }
        }),
    };
    let Some(kind) = kind else { return Signal::none() };
    let confidence = obj
        .get("confidence")
        .and_then(Value::as_f64)
        .filter(|p| (0.0..=1.0).contains(p))
        .or(response_confidence);
    let reason = obj.get("reasoning").and_then(Value::as_str).map(str::to_string);
    Signal { kind, confidence, reason }
}

fn call_record(req: &BackendRequest, result: &Result<BackendResponse, HalError>) -> CallRecord {
    CallRecord {
        key: req.binding_id.clone(),
        judge: None,
        input_hash: req.input_hash(),
        response: result.as_ref().ok().cloned(),
        error: result.as_ref().err().map(HalError::to_record),
        child: None,
    }
}

fn remaining(limits: &Limits, used: &ResourceCounters) -> Limits {
    Limits {
        max_tokens: limits.max_tokens.saturating_sub(used.tokens_used).max(1),
        max_steps: limits.max_steps.saturating_sub(used.steps_used).max(1),
        max_cost_units: (limits.max_cost_units - used.cost_units).max(f64::MIN_POSITIVE),
    }
}

impl Kernel<'_> {
    pub(crate) fn execute_step(&self, node: &str, b: &InstructionBinding, state: &ManagedState, seq: u64) -> StepOutcome {
        let memory = state.user_memory();
        let inputs = project_inputs(&b.input_schema, memory);
        let mut out = StepOutcome::new(&inputs);
        out.checked = inputs.clone();
        let report = validate_schema(&inputs, &b.input_schema);
        if !report.conforms() {
            out.fail("input schema violation", format!("input schema violation: {}", report.summary()));
            return out;
        }
        let ty = &b.instruction_type;
        match ty.name.as_str() {
            "VERIFY" | "CONSTRAIN" => self.run_check(b, &inputs, &mut out),
            "MONITOR_RESOURCES" => self.monitor(b, state, &mut out),
            "INTERRUPT" => out.forced = Some(Forced::Interrupt(format!("interrupt requested at `{node}`"))),
            "TOOL_BUILD" => {
                out.forced = Some(Forced::Halt(HaltReason::Error, "TOOL_BUILD is not supported by this runtime".into()));
                out.error = Some("not_supported: TOOL_BUILD".into());
            }
            _ => match ty.trust {
                TrustClass::Probabilistic => self.generate(b, &inputs, memory, &mut out),
                TrustClass::Deterministic => self.call_tool(b, &inputs, &mut out),
                TrustClass::Terminal => {
                    if out.accept_output(inputs.clone(), &b.output_schema) {
                        out.final_output = Some(inputs.clone());
                    }
                }
                TrustClass::Handoff => self.delegate(b, &inputs, state, seq, &mut out),
            },
        }
        if !out.signal.is_fail() && out.forced.is_none() {
            self.verify_output(b, &inputs, &mut out);
        }
        out
    }

    fn run_check(&self, b: &InstructionBinding, inputs: &Value, out: &mut StepOutcome) {
        let validators = self.constitution.validators();
        let signal = match validators.resolve(&b.implementation_ref) {
            Ok(v) => validators.run(&v, inputs),
            Err(e) => {
                out.fail("unknown validator", e.to_string());
                return;
            }
        };
        out.output = json!({
            "result": if signal.is_pass() { "PASS" } else { "FAIL" },
            "error_message": if signal.is_pass() { Value::Null } else { json!(signal.reason.clone().unwrap_or_default()) },
        });
        out.signal = signal;
    }

    fn monitor(&self, b: &InstructionBinding, state: &ManagedState, out: &mut StepOutcome) {
        let r = state.os_metadata().resources();
        let l = &self.config.limits;
        let frac = (r.tokens_used as f64 / l.max_tokens as f64)
            .max(r.steps_used as f64 / l.max_steps as f64)
            .max(r.cost_units / l.max_cost_units);
        let within = frac < 1.0;
        if out.accept_output(json!({"budget_fraction": frac, "within_budget": within}), &b.output_schema) {
            out.signal = if within { Signal::pass() } else { Signal::fail("budget exhausted") };
        }
    }

    fn invoke(&self, req: &BackendRequest, out: &mut StepOutcome) -> Option<BackendResponse> {
        let result = self.backend.invoke(req);
        out.calls.push(call_record(req, &result));
        match result {
            Ok(r) => {
                out.charge(&r);
                Some(r)
            }
            Err(e) => {
                out.fail(&e.to_string(), format!("{}: {}", e.kind(), e));
                None
            }
        }
    }

    fn generate(&self, b: &InstructionBinding, inputs: &Value, memory: &Map<String, Value>, out: &mut StepOutcome) {
        let mut req = BackendRequest::new(&b.id, inputs.clone());
        if b.is_template_ref() {
            let template = self.constitution.text(&b.implementation_ref).unwrap_or_default();
            match render_template(template, memory) {
                Ok(p) => req.prompt = Some(p),
                Err(e) => return out.fail("template error", format!("{}: {}", e.kind(), e)),
            }
        }
        let Some(resp) = self.invoke(&req, out) else { return };
        if !out.accept_output(resp.output.clone(), &b.output_schema) {
            return;
        }
        out.checked = resp.output.clone();
        if b.instruction_type.core.emits_trusted_signal() || b.signal_field.is_some() {
            out.signal = infer_signal(&resp.output, b.signal_field.as_deref(), resp.confidence);
        }
    }

    fn call_tool(&self, b: &InstructionBinding, inputs: &Value, out: &mut StepOutcome) {
        let tool = self.constitution.tools().get(&b.implementation_ref);
        let output = match tool.and_then(|t| t.builtin.as_deref()) {
            Some("constant") => tool.and_then(|t| t.output.clone()).unwrap_or_else(|| json!({})),
            Some("echo") => inputs.clone(),
            Some(other) => return out.fail("unknown builtin tool", format!("tool: unknown builtin `{other}`")),
            None => {
                let req = BackendRequest::new(&b.id, inputs.clone());
                match self.invoke(&req, out) {
                    Some(r) => r.output,
                    None => return,
                }
            }
        };
        if !out.accept_output(output.clone(), &b.output_schema) {
            return;
        }
        out.checked = output.clone();
        out.signal = if b.signal_field.is_some() {
            infer_signal(&output, b.signal_field.as_deref(), None)
        } else if b.instruction_type.core.emits_trusted_signal() {
            Signal::pass()
        } else {
            Signal::none()
        };
    }

    fn delegate(&self, b: &InstructionBinding, inputs: &Value, state: &ManagedState, seq: u64, out: &mut StepOutcome) {
        let path = format!("{}.{seq}.trace.ndjson", b.id);
        let (response, child) = match self.backend.recorded_call(&b.id) {
            Some(rec) => match (rec.response, rec.child) {
                (Some(r), Some(c)) => (r, c),
                _ => return out.fail("sub-run failed", format!("recorded call for `{}` has no sub-run", b.id)),
            },
            None => match self.run_child(b, inputs, state, &path) {
                Ok(pair) => pair,
                Err(e) => return out.fail("sub-run failed", e),
            },
        };
        out.calls.push(CallRecord {
            key: b.id.clone(),
            judge: None,
            input_hash: digest_value(inputs),
            response: Some(response.clone()),
            error: None,
            child: Some(child.clone()),
        });
        out.charge(&response);
        out.delta.steps_used += response.latency_ticks;
        if child.routing.halt_reason() != Some(HaltReason::Completed) {
            let why = format!("sub-run ended with {}", child.routing.label());
            return out.fail(&why, format!("delegate: {why}"));
        }
        if out.accept_output(response.output.clone(), &b.output_schema) {
            out.checked = response.output;
        }
    }

    fn run_child(
        &self,
        b: &InstructionBinding,
        inputs: &Value,
        state: &ManagedState,
        path: &str,
    ) -> Result<(BackendResponse, ChildRef), String> {
        let child = self.constitution.child(&b.implementation_ref).ok_or("sub-package not loaded")?;
        let env = if child.policy(&self.config.environment).is_some() {
            self.config.environment.clone()
        } else {
            child.default_environment().ok_or("sub-package has no policy for this environment")?.to_string()
        };
        let config = RunConfig {
            environment: env,
            limits: remaining(&self.config.limits, state.os_metadata().resources()),
            interactive: false,
            escalation: self.config.escalation.clone(),
        };
        let options = RunOptions { checkpoint_dir: None, ..self.options.clone() };
        let outcome = Kernel::new(child, &config, self.backend).with_options(&options).run(inputs.clone()).map_err(|e| e.to_string())?;
        if let Some(dir) = &self.options.artifacts_dir {
            outcome.record.write(&dir.join(path)).map_err(|e| e.to_string())?;
        }
        let used = outcome.state.os_metadata().resources();
        let routing = outcome
            .record
            .final_routing()
            .cloned()
            .unwrap_or_else(|| RoutingDecision::halt(HaltReason::Error, "empty sub-run".to_string()));
        let response = BackendResponse {
            output: outcome.final_output.clone().unwrap_or_else(|| json!({})),
            tokens_used: used.tokens_used,
            cost_units: used.cost_units,
            confidence: None,
            latency_ticks: used.steps_used,
        };
        Ok((response, ChildRef { path: path.to_string(), record_hash: outcome.record.chain_head().to_string(), routing }))
    }

    /// Applies the binding's verification config. VERIFY and CONSTRAIN
    /// bindings have it applied to their inputs, everything else to its
    /// output. Async checks are queued instead.
    fn verify_output(&self, b: &InstructionBinding, inputs: &Value, out: &mut StepOutcome) {
        let Some(v) = &b.verification else { return };
        let is_check = matches!(b.instruction_type.name.as_str(), "VERIFY" | "CONSTRAIN");
        let value = if is_check { inputs.clone() } else { out.output.clone() };
        if v.level == 3 {
            out.review = true;
            return;
        }
        if b.async_check {
            out.deferred = Some(value);
            return;
        }
        let (signal, calls) = self.run_verification(b, v, &value);
        for r in calls.iter().filter_map(|c| c.response.as_ref()) {
            out.charge(r);
        }
        out.calls.extend(calls);
        out.checked = value;
        if signal.is_fail() && !is_check {
            out.quarantined = true;
            out.verification_failed = true;
        }
        out.signal = signal;
    }

    /// Runs a level 1 or level 2 check and returns the signal plus any judge
    /// calls made.
    pub(crate) fn run_verification(&self, b: &InstructionBinding, v: &VerificationConfig, value: &Value) -> (Signal, Vec<CallRecord>) {
        if let Some(r) = &v.validator_ref {
            let validators = self.constitution.validators();
            return match validators.resolve(r) {
                Ok(val) => (validators.run(&val, value), Vec::new()),
                Err(e) => (Signal::fail(e.to_string()), Vec::new()),
            };
        }
        let rubric = v.rubric.as_deref().and_then(|r| self.constitution.text(r)).unwrap_or_default();
        match v.ensemble {
            Some(spec) => match run_judge_ensemble(value, rubric, self.backend, &b.id, spec, self.options.execution) {
                Ok(e) => (e.result.signal, e.calls),
                Err(e) => (Signal::fail(e.to_string()), Vec::new()),
            },
            None => {
                let (s, rec) = run_judge_check(value, rubric, self.backend, &format!("{}.judge", b.id));
                (s, vec![rec])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_inference() {
        let s = infer_signal(&json!({"is_productive": false, "reasoning": "irrelevant"}), None, None);
        assert!(s.is_fail());
        assert_eq!(s.reason.as_deref(), Some("irrelevant"));
        assert!(infer_signal(&json!({"verdict": "PASS", "confidence": 0.9}), None, None).is_pass());
        assert_eq!(infer_signal(&json!({"a": true, "b": false}), None, None).kind, SignalKind::None);
        assert!(infer_signal(&json!({"ok": "true", "x": true}), Some("ok"), None).is_pass());
        assert_eq!(infer_signal(&json!({"result": true}), None, Some(0.7)).confidence, Some(0.7));
    }

    #[test]
    fn projection_keeps_declared_fields() {
        let mem = json!({"a": 1, "b": 2}).as_object().unwrap().clone();
        let schema = SchemaSpec::record([("a", SchemaSpec::number())]);
        assert_eq!(project_inputs(&schema, &mem), json!({"a": 1}));
        assert_eq!(project_inputs(&SchemaSpec::any(), &mem), json!({"a": 1, "b": 2}));
    }
}
