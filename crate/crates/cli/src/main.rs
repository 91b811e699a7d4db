//! `arbiter`: lint, run, resume, replay, inspect and evaluate constitutions.

mod backend;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit code for unusable input: bad package, flags, fixture or file.
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "arbiter", version, about = "Governance kernel for agent workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
}

#[derive(Args)]
struct BackendArgs {
    /// `echo`, `remote`, or `scripted:<fixture.yaml>`.
    #[arg(long, conflicts_with = "fixture")]
    backend: Option<String>,
    /// Shorthand for `--backend scripted:<fixture>`.
    #[arg(long)]
    fixture: Option<PathBuf>,
}

#[derive(Args)]
struct LimitArgs {
    #[arg(long)]
    max_tokens: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    max_cost: Option<f64>,
    /// Confidence below which a signal escalates.
    #[arg(long)]
    threshold: Option<f64>,
    /// Validator to re-check with instead of interrupting on low confidence.
    #[arg(long)]
    escalate_with: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a package against a policy set without running it.
    Lint {
        path: PathBuf,
        #[arg(long)]
        env: Option<String>,
        /// Override the policy set's semantics (`adjacent` or `taint`).
        #[arg(long)]
        semantics: Option<String>,
        #[arg(long, value_enum, default_value = "human")]
        format: Format,
    },
    /// Run a package from its entry node.
    Run {
        path: PathBuf,
        #[arg(long)]
        env: Option<String>,
        #[command(flatten)]
        backend: BackendArgs,
        /// Initial user memory (YAML or JSON mapping).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Answer interrupts on stdin instead of stopping.
        #[arg(long)]
        interactive: bool,
        /// Directory for the trace, checkpoints and sub-run traces.
        #[arg(long, default_value = "arbiter-out")]
        out: PathBuf,
        #[command(flatten)]
        limits: LimitArgs,
        #[arg(long, value_enum, default_value = "human")]
        format: Format,
    },
    /// Continue an interrupted run from its checkpoint.
    Resume {
        checkpoint: PathBuf,
        #[arg(long, group = "decision")]
        approve: bool,
        #[arg(long, group = "decision")]
        reject: bool,
        /// Approve with a patch (YAML or JSON mapping, inline or a file).
        #[arg(long, group = "decision")]
        edit: Option<String>,
        /// Defaults to the package recorded in the checkpoint.
        #[arg(long)]
        path: Option<PathBuf>,
        /// Defaults to the trace recorded in the checkpoint.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_enum, default_value = "human")]
        format: Format,
    },
    /// Re-execute a trace against its recorded responses and compare.
    Replay {
        trace: PathBuf,
        path: PathBuf,
        #[arg(long, value_enum, default_value = "human")]
        format: Format,
    },
    /// Inspect a trace: the event list, or the state after `--at k` events.
    Trace {
        trace: PathBuf,
        #[arg(long, conflicts_with = "show")]
        at: Option<usize>,
        #[arg(long)]
        show: bool,
        #[arg(long, value_enum, default_value = "human")]
        format: Format,
    },
    /// Run a golden dataset and gate it against a baseline.
    Eval {
        path: PathBuf,
        dataset: PathBuf,
        /// Defaults to `baseline.json` next to the dataset.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Store this run as the new baseline.
        #[arg(long)]
        write_baseline: bool,
        /// Allow `--write-baseline` to replace an existing file.
        #[arg(long)]
        force: bool,
        /// Fixture for cases that do not name one.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        env: Option<String>,
        /// Directory for per-case traces.
        #[arg(long, default_value = "arbiter-eval")]
        out: PathBuf,
        /// Largest tolerated pass-rate drop over baselined cases.
        #[arg(long, default_value_t = 0.0)]
        max_drop: f64,
        /// Do not block merely because a baselined case now fails.
        #[arg(long)]
        allow_newly_failing: bool,
        /// Run cases one after another.
        #[arg(long)]
        sequential: bool,
        #[arg(long, value_enum, default_value = "human")]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
