use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use arbiter_core::canonical::to_canonical;
use arbiter_core::edlc::{
    gate_regression, load_baseline, run_golden_suite, write_baseline, EvalReport, GateThresholds, GateVerdict,
    GoldenDataset, SuiteOptions,
};
use arbiter_core::graph::{load_constitution, Constitution};
use arbiter_core::hal::Backend;
use arbiter_core::kernel::{Kernel, ResumeDecision, RunConfig, RunOptions, RunOutcome};
use arbiter_core::parallel::Execution;
use arbiter_core::policy::{lint_constitution, Location, Semantics};
use arbiter_core::state::{
    materialize_at, verify_replay, Checkpoint, EventKind, FlightRecord, HaltReason, ReplayVerdict, RoutingDecision, StateError,
    TraceEvent,
};
use serde_json::{json, Map, Value};

use crate::backend::{absolute, BackendChoice};
use crate::{Command, Format, LimitArgs};

const EXIT_OK: u8 = 0;
const EXIT_FAILED: u8 = 1;
const EXIT_INTERRUPTED: u8 = 3;
const EXIT_BUDGET: u8 = 4;

const TRACE_FILE: &str = "trace.ndjson";

pub fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Lint { path, env, semantics, format } => lint(&path, env.as_deref(), semantics.as_deref(), format),
        Command::Run { path, env, backend, input, interactive, out, limits, format } => {
            let backend = BackendChoice::from_args(&backend)?.unwrap_or(BackendChoice::Echo);
            run(&path, env.as_deref(), &backend, input.as_deref(), interactive, &out, &limits, format)
        }
        Command::Resume { checkpoint, approve, reject, edit, path, trace, backend, format } => {
            let decision = match (approve, reject, edit) {
                (true, _, _) => ResumeDecision::Approve,
                (_, true, _) => ResumeDecision::Reject,
                (_, _, Some(patch)) => ResumeDecision::Edit(read_patch(&patch)?),
                _ => bail!("choose one of --approve, --reject or --edit"),
            };
            let backend = BackendChoice::from_args(&backend)?;
            resume(&checkpoint, decision, path, trace, backend, format)
        }
        Command::Replay { trace, path, format } => replay(&trace, &path, format),
        Command::Trace { trace, at, show: _, format } => inspect(&trace, at, format),
        Command::Eval {
            path,
            dataset,
            baseline,
            write_baseline,
            force,
            fixture,
            env,
            out,
            max_drop,
            allow_newly_failing,
            sequential,
            format,
        } => {
            let thresholds = GateThresholds { max_pass_rate_drop: max_drop, newly_failing_forbidden: !allow_newly_failing };
            let execution = if sequential { Execution::Sequential } else { Execution::Parallel };
            let options = SuiteOptions { fixture, out_dir: Some(out), execution };
            eval(&path, &dataset, baseline, write_baseline, force, env.as_deref(), &options, &thresholds, format)
        }
    }
}

fn load(path: &Path) -> Result<Constitution> {
    load_constitution(path).with_context(|| format!("loading package {}", path.display()))
}

fn environment(c: &Constitution, env: Option<&str>) -> Result<String> {
    match env {
        Some(e) if c.policy(e).is_some() => Ok(e.to_string()),
        Some(e) => bail!("no policy set for environment `{e}`"),
        None => Ok(RunConfig::for_constitution(c)?.environment),
    }
}

fn read_document(text: &str) -> Result<Value> {
    serde_yaml::from_str(text).map_err(|e| anyhow!("not YAML or JSON: {e}"))
}

fn read_mapping(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match read_document(&text)? {
        Value::Object(m) => Ok(m),
        Value::Null => Ok(Map::new()),
        _ => bail!("{} must hold a mapping", path.display()),
    }
}

/// `--edit` takes an inline mapping or a file holding one.
fn read_patch(arg: &str) -> Result<Map<String, Value>> {
    let p = Path::new(arg);
    if p.is_file() {
        return read_mapping(p);
    }
    match read_document(arg)? {
        Value::Object(m) => Ok(m),
        _ => bail!("--edit needs a mapping"),
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", to_canonical(v));
}

fn lint(path: &Path, env: Option<&str>, semantics: Option<&str>, format: Format) -> Result<u8> {
    let c = load(path)?;
    let env = environment(&c, env)?;
    let mut policy = c.policy(&env).expect("environment checked").clone();
    if let Some(s) = semantics {
        policy = policy.with_semantics(s.parse::<Semantics>()?);
    }
    let violations = lint_constitution(&c, &policy);
    let warnings: Vec<_> = c.structure().warnings().collect();
    match format {
        Format::Json => print_json(&json!({
            "environment": env,
            "violations": violations,
            "structure_warnings": warnings,
        })),
        Format::Human => {
            for v in &violations {
                let at = match &v.location {
                    Location::StaticEdge { from, to } => format!("{from} -> {to}"),
                    Location::RuntimeStep { seq } => format!("step {seq}"),
                };
                println!("{:?} {} at {at}: {}", v.severity, v.rule_id, v.message);
            }
            for w in &warnings {
                println!("warning: {}", w.message);
            }
            println!("{} violation(s) under {env}", violations.len());
        }
    }
    Ok(if violations.is_empty() { EXIT_OK } else { EXIT_FAILED })
}

fn exit_code(outcome: &RunOutcome) -> u8 {
    match outcome.halt {
        Some(HaltReason::Completed) => EXIT_OK,
        Some(HaltReason::BudgetExhausted) => EXIT_BUDGET,
        Some(_) => EXIT_FAILED,
        None if outcome.interrupt.is_some() => EXIT_INTERRUPTED,
        None => EXIT_FAILED,
    }
}

fn routing_text(r: &RoutingDecision) -> String {
    match r {
        RoutingDecision::Continue { node } => format!("continue -> {node}"),
        RoutingDecision::Fallback { node } => format!("fallback -> {node}"),
        RoutingDecision::Replan { node } => format!("replan -> {node}"),
        RoutingDecision::Interrupt { ticket } => format!("interrupt {} ({})", ticket.id, ticket.reason),
        RoutingDecision::Halt { reason, detail } => match detail {
            Some(d) => format!("halt {reason:?}: {d}"),
            None => format!("halt {reason:?}"),
        },
    }
}

fn event_line(e: &TraceEvent) -> String {
    let signal = match (&e.signal.reason, e.signal.confidence) {
        (Some(r), _) => format!("{:?}({r})", e.signal.kind),
        (None, Some(p)) => format!("{:?}(p={p})", e.signal.kind),
        (None, None) => format!("{:?}", e.signal.kind),
    };
    let quarantine = if e.quarantined { " [quarantined]" } else { "" };
    let kind = match e.kind {
        EventKind::Step => String::new(),
        EventKind::Admission => " [admission]".into(),
        EventKind::Resume => " [resume]".into(),
        EventKind::DeferredCheck => " [deferred check]".into(),
    };
    format!(
        "{:>3}  {:<18} {:<28} {:<24} {}{quarantine}{kind}",
        e.seq,
        e.instruction_type,
        e.binding_id,
        signal,
        routing_text(&e.routing)
    )
}

fn report_outcome(outcome: &RunOutcome, trace: &Path, format: Format) {
    match format {
        Format::Json => print_json(&json!({
            "halt": outcome.halt,
            "interrupt": outcome.interrupt,
            "events": outcome.record.len(),
            "resources": outcome.state.os_metadata().resources(),
            "final_output": outcome.final_output,
            "trace": trace.display().to_string(),
        })),
        Format::Human => {
            for e in outcome.record.events() {
                println!("{}", event_line(e));
            }
            match (&outcome.halt, &outcome.interrupt) {
                (Some(h), _) => println!("halted: {h:?}"),
                (None, Some(t)) => println!("interrupted: {} ({}); checkpoint {}", t.id, t.reason, t.checkpoint),
                _ => {}
            }
            if let Some(out) = &outcome.final_output {
                println!("response: {}", to_canonical(out));
            }
            println!("trace: {}", trace.display());
        }
    }
}

fn prompt(outcome: &RunOutcome) -> Result<ResumeDecision> {
    let ticket = outcome.interrupt.as_ref().expect("prompted only on interrupt");
    let stdin = std::io::stdin();
    loop {
        eprint!("{} at `{}`: {}. [a]pprove, [r]eject, [e]dit <mapping>: ", ticket.id, ticket.node_id, ticket.reason);
        std::io::stderr().flush().ok();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            bail!("stdin closed while waiting for a decision");
        }
        let line = line.trim();
        let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        match word {
            "a" | "approve" => return Ok(ResumeDecision::Approve),
            "r" | "reject" => return Ok(ResumeDecision::Reject),
            "e" | "edit" => match read_patch(rest.trim()) {
                Ok(p) => return Ok(ResumeDecision::Edit(p)),
                Err(e) => eprintln!("{e}"),
            },
            _ => eprintln!("unrecognized answer"),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    path: &Path,
    env: Option<&str>,
    backend: &BackendChoice,
    input: Option<&Path>,
    interactive: bool,
    out: &Path,
    limits: &LimitArgs,
    format: Format,
) -> Result<u8> {
    let c = load(path)?;
    let mut config = RunConfig::new(environment(&c, env)?);
    config.interactive = interactive;
    if let Some(t) = limits.max_tokens {
        config.limits.max_tokens = t;
    }
    if let Some(s) = limits.max_steps {
        config.limits.max_steps = s;
    }
    if let Some(x) = limits.max_cost {
        config.limits.max_cost_units = x;
    }
    if let Some(p) = limits.threshold {
        config.escalation.threshold = p;
    }
    config.escalation.run_check = limits.escalate_with.clone();
    let initial = match input {
        Some(p) => read_mapping(p)?,
        None => Map::new(),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trace = absolute(out).join(TRACE_FILE);
    let session = BTreeMap::from([
        ("trace_path".to_string(), trace.display().to_string()),
        ("constitution_path".to_string(), absolute(path).display().to_string()),
        ("backend".to_string(), backend.to_session()),
    ]);
    let options = RunOptions {
        checkpoint_dir: Some(absolute(out)),
        artifacts_dir: Some(absolute(out)),
        session,
        execution: Execution::default(),
    };
    let be = backend.build()?;
    let kernel = Kernel::new(&c, &config, be.as_ref()).with_options(&options);
    let mut outcome = kernel.run(Value::Object(initial))?;
    while interactive && outcome.interrupt.is_some() {
        let decision = prompt(&outcome)?;
        let ckpt = outcome.checkpoint.clone().expect("interrupts carry a checkpoint");
        outcome = kernel.resume(&ckpt, outcome.record, decision)?;
    }
    outcome.record.write(&trace)?;
    report_outcome(&outcome, &trace, format);
    Ok(exit_code(&outcome))
}

fn resume(
    checkpoint: &Path,
    decision: ResumeDecision,
    path: Option<PathBuf>,
    trace: Option<PathBuf>,
    backend: Option<BackendChoice>,
    format: Format,
) -> Result<u8> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let session = |k: &str| ckpt.session.get(k).map(PathBuf::from);
    let path = path.or_else(|| session("constitution_path")).context("no package given and none recorded")?;
    let trace = trace.or_else(|| session("trace_path")).context("no trace given and none recorded")?;
    let backend = match backend {
        Some(b) => b,
        None => BackendChoice::parse(ckpt.session.get("backend").map(String::as_str).unwrap_or("echo"))?,
    };
    let c = load(&path)?;
    let record = FlightRecord::read(&trace).with_context(|| format!("reading trace {}", trace.display()))?;
    let config: RunConfig = serde_json::from_value(ckpt.config.clone()).context("checkpoint run configuration")?;
    let dir = trace.parent().map(Path::to_path_buf);
    let options = RunOptions {
        checkpoint_dir: dir.clone(),
        artifacts_dir: dir,
        session: ckpt.session.clone(),
        execution: Execution::default(),
    };
    let be: Box<dyn Backend> = backend.build()?;
    let outcome = Kernel::new(&c, &config, be.as_ref()).with_options(&options).resume(&ckpt, record, decision)?;
    outcome.record.write(&trace)?;
    report_outcome(&outcome, &trace, format);
    Ok(exit_code(&outcome))
}

fn replay(trace: &Path, path: &Path, format: Format) -> Result<u8> {
    let text = std::fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let record = FlightRecord::from_ndjson_unchecked(&text)?;
    let c = load(path)?;
    let verdict = match record.verify_chain() {
        Err(StateError::ChainBreak { seq, reason }) => ReplayVerdict::FirstDivergence { seq, field: reason },
        Err(e) => return Err(e.into()),
        Ok(()) => verify_replay(&record, &c)?,
    };
    match format {
        Format::Json => print_json(&verdict),
        Format::Human => match &verdict {
            ReplayVerdict::Equivalent => println!("Equivalent"),
            ReplayVerdict::FirstDivergence { seq, field } => println!("first divergence at seq {seq}: {field}"),
        },
    }
    Ok(if verdict == ReplayVerdict::Equivalent { EXIT_OK } else { EXIT_FAILED })
}

fn inspect(trace: &Path, at: Option<usize>, format: Format) -> Result<u8> {
    let record = FlightRecord::read(trace).with_context(|| format!("reading {}", trace.display()))?;
    match at {
        Some(k) => {
            let state = materialize_at(&record, k)?;
            match format {
                Format::Json => print_json(&state),
                Format::Human => {
                    let meta = state.os_metadata();
                    let s = meta.last_signal();
                    println!("after {k} event(s):");
                    println!("last signal: {:?}{}", s.kind, s.reason.as_ref().map(|r| format!(" ({r})")).unwrap_or_default());
                    println!("resources: {}", to_canonical(meta.resources()));
                    println!("user memory: {}", to_canonical(state.user_memory()));
                    println!("state hash: {}", state.hash());
                }
            }
        }
        None => match format {
            Format::Json => print_json(&record.events()),
            Format::Human => {
                for e in record.events() {
                    println!("{}", event_line(e));
                }
            }
        },
    }
    Ok(EXIT_OK)
}

fn print_eval(report: &EvalReport, verdict: Option<&GateVerdict>, format: Format) {
    match format {
        Format::Json => print_json(&json!({"report": report, "gate": verdict})),
        Format::Human => {
            let width = report.cases.iter().map(|c| c.id.len()).max().unwrap_or(0);
            for c in &report.cases {
                let verdict = if c.pass { "PASS" } else { "FAIL" };
                println!("{verdict} {:<width$} {:<10} {}", c.id, c.mode.to_string(), c.detail);
            }
            println!("pass rate {} (tokens {})", report.pass_rate, report.tokens_total);
            if let Some(v) = verdict {
                println!("gate: {:?}", v.decision);
                for r in &v.reasons {
                    println!("  blocked: {r}");
                }
                for w in &v.warnings {
                    println!("  warning: {w}");
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn eval(
    path: &Path,
    dataset: &Path,
    baseline: Option<PathBuf>,
    write: bool,
    force: bool,
    env: Option<&str>,
    options: &SuiteOptions,
    thresholds: &GateThresholds,
    format: Format,
) -> Result<u8> {
    let c = load(path)?;
    let data = GoldenDataset::load(dataset)?;
    let config = RunConfig::new(environment(&c, env)?);
    let baseline_path = baseline.unwrap_or_else(|| dataset.parent().unwrap_or(Path::new(".")).join("baseline.json"));
    let report = run_golden_suite(&c, &data, &config, options)?;
    if write {
        write_baseline(&report, &baseline_path, force)?;
        print_eval(&report, None, format);
        if format == Format::Human {
            println!("baseline written to {}", baseline_path.display());
        }
        return Ok(EXIT_OK);
    }
    let base = if baseline_path.exists() { Some(load_baseline(&baseline_path)?) } else { None };
    let verdict = gate_regression(&report, base.as_ref(), thresholds);
    print_eval(&report, Some(&verdict), format);
    Ok(if verdict.decision.blocks() { EXIT_FAILED } else { EXIT_OK })
}
