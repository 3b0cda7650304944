//! End-to-end commands: run a task bundle, replay a recorded run, report on a
//! transcript. Each returns an [`ExitStatus`] plus diagnostics.

pub mod replay;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use crate::config::{load_config, RunConfig, SearchMode};
use crate::context::{Budget, Prompts, RunContext};
use crate::digest::content_digest;
use crate::lifecycle::{run_aggregator, run_setup, FinalSubmission, LifecycleError, SetupStatus};
use crate::manager::{run_manager, EngineRunner, StopCause, SubAgentRunner};
use crate::provider::{
    load_fixture_pack, FixturePack, LiveBackend, ProviderBackend, ProviderError, ProviderMode, RetryPolicy,
    ScriptedBackend, TranscriptSink, UreqTransport,
};
use crate::workspace::{
    copy_tree, init_repositories, tree_digest, validate_bundle, DataCopyMode, FixtureSearch, LiveSearch, NoSearch,
    SearchBackend,
};

pub use replay::{cmd_replay, replay_fixture};
pub use report::{build_report, cmd_report, ReportFormat};

pub const TRANSCRIPT: &str = "transcript.jsonl";
pub const INPUT_DIR: &str = "input";
pub const SUBMISSION: &str = "submission.json";

/// Process exit status. The numeric codes are stable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok,
    Other,
    ConfigInvalid,
    SetupFailed,
    NoValidCandidates,
    BudgetExhausted,
    ProviderFault,
    ReplayDivergence,
    TranscriptCorrupt,
    ReplayRefused,
}

impl ExitStatus {
    pub const ALL: [ExitStatus; 10] = [
        Self::Ok,
        Self::Other,
        Self::ConfigInvalid,
        Self::SetupFailed,
        Self::NoValidCandidates,
        Self::BudgetExhausted,
        Self::ProviderFault,
        Self::ReplayDivergence,
        Self::TranscriptCorrupt,
        Self::ReplayRefused,
    ];

    pub fn code(self) -> i32 {
        match self {
            Self::Ok => 0,
            Self::Other => 1,
            Self::ConfigInvalid => 2,
            Self::SetupFailed => 3,
            Self::NoValidCandidates => 4,
            Self::BudgetExhausted => 5,
            Self::ProviderFault => 6,
            Self::ReplayDivergence => 7,
            Self::TranscriptCorrupt => 8,
            Self::ReplayRefused => 9,
        }
    }

    pub fn from_code(code: i32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn word(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Other => "error",
            Self::ConfigInvalid => "config_invalid",
            Self::SetupFailed => "setup_failed",
            Self::NoValidCandidates => "no_valid_candidates",
            Self::BudgetExhausted => "budget_exhausted",
            Self::ProviderFault => "provider_fault",
            Self::ReplayDivergence => "replay_divergence",
            Self::TranscriptCorrupt => "transcript_corrupt",
            Self::ReplayRefused => "replay_refused",
        }
    }
}

#[derive(Default)]
pub struct RunOptions {
    /// Replaces the backend the config would build.
    pub backend: Option<Arc<dyn ProviderBackend>>,
    pub search: Option<Arc<dyn SearchBackend>>,
    pub runner: Option<Box<dyn SubAgentRunner>>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub run_dir: PathBuf,
    pub submission: Option<FinalSubmission>,
    pub diagnostics: Vec<String>,
}

impl RunOutcome {
    fn fail(run_dir: &Path, status: ExitStatus, diagnostic: impl Into<String>) -> Self {
        Self { status, run_dir: run_dir.to_path_buf(), submission: None, diagnostics: vec![diagnostic.into()] }
    }
}

fn build_backend(config: &RunConfig) -> Result<(Arc<dyn ProviderBackend>, Option<FixturePack>), String> {
    let p = &config.provider;
    match p.mode {
        ProviderMode::Scripted => {
            let path = p.fixture_path.as_ref().ok_or("provider.fixture_path is required in scripted mode")?;
            let pack = load_fixture_pack(path).map_err(|e| e.to_string())?;
            Ok((Arc::new(ScriptedBackend::new(pack.clone())), Some(pack)))
        }
        ProviderMode::Live => {
            let credential = std::env::var(&p.credential_env).ok();
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(600)));
            Ok((Arc::new(LiveBackend::new(p.endpoint.clone(), credential, transport, RetryPolicy::default())), None))
        }
    }
}

fn build_search(config: &RunConfig) -> Result<Arc<dyn SearchBackend>, String> {
    let s = &config.search;
    Ok(match s.mode {
        SearchMode::None => Arc::new(NoSearch),
        SearchMode::Fixture => {
            let path = s.fixture_path.as_ref().ok_or("search.fixture_path is required in fixture mode")?;
            Arc::new(FixtureSearch::load(path, s.max_results)?)
        }
        SearchMode::Live => {
            let credential = std::env::var(&config.provider.credential_env).ok();
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(60)));
            Arc::new(LiveSearch::new(s.endpoint.clone(), credential, transport, s.max_results))
        }
    })
}

/// Copies everything a replay needs into `<run_dir>/input`: the bundle, the
/// fixture pack, the search fixture, the prompts and the config with paths
/// made relative to that directory.
fn persist_inputs(run_dir: &Path, bundle: &Path, config: &RunConfig, pack: Option<&FixturePack>, prompts: &Prompts) -> Result<PathBuf, String> {
    let input = run_dir.join(INPUT_DIR);
    let staged_bundle = input.join("bundle");
    copy_tree(bundle, &staged_bundle, DataCopyMode::Copy).map_err(|e| e.to_string())?;
    let mut stored = config.clone();
    stored.paths.run_dir = PathBuf::from("..");
    if let Some(pack) = pack {
        fs::write(input.join("fixture.jsonl"), pack.to_jsonl()).map_err(|e| e.to_string())?;
        stored.provider.fixture_path = Some(PathBuf::from("fixture.jsonl"));
    }
    if let (SearchMode::Fixture, Some(p)) = (config.search.mode, &config.search.fixture_path) {
        fs::copy(p, input.join("search.jsonl")).map_err(|e| format!("{}: {e}", p.display()))?;
        stored.search.fixture_path = Some(PathBuf::from("search.jsonl"));
    }
    let prompt_dir = input.join("prompts");
    fs::create_dir_all(&prompt_dir).map_err(|e| e.to_string())?;
    for (name, text) in [
        ("manager", &prompts.manager),
        ("designer", &prompts.designer),
        ("coder", &prompts.coder),
        ("tuner", &prompts.tuner),
        ("setup", &prompts.setup),
        ("aggregator", &prompts.aggregator),
    ] {
        fs::write(prompt_dir.join(format!("{name}.md")), text).map_err(|e| e.to_string())?;
    }
    stored.paths.prompts_dir = Some(PathBuf::from("prompts"));
    fs::write(input.join("run.conf"), stored.to_string()).map_err(|e| e.to_string())?;
    Ok(staged_bundle)
}

fn fault_status(ctx: &RunContext) -> Option<String> {
    ctx.faults().into_iter().find(|e| matches!(e, ProviderError::ScriptMismatch { .. })).map(|e| e.to_string())
}

/// Runs setup, the manager loop and the aggregator over a fresh run
/// directory taken from `config.paths.run_dir`.
pub fn execute_run(bundle: &Path, config: RunConfig, options: RunOptions) -> RunOutcome {
    let run_dir = config.paths.run_dir.clone();
    if let Err(e) = config.validate() {
        return RunOutcome::fail(&run_dir, ExitStatus::ConfigInvalid, e.to_string());
    }
    if let Err(e) = validate_bundle(bundle) {
        return RunOutcome::fail(&run_dir, ExitStatus::ConfigInvalid, e.to_string());
    }
    if run_dir.join(TRANSCRIPT).exists() {
        return RunOutcome::fail(&run_dir, ExitStatus::ConfigInvalid, format!("{} already holds a run", run_dir.display()));
    }
    let (backend, pack) = match options.backend {
        Some(b) => (b, None),
        None => match build_backend(&config) {
            Ok(x) => x,
            Err(e) => return RunOutcome::fail(&run_dir, ExitStatus::ConfigInvalid, e),
        },
    };
    let search = match options.search.map(Ok).unwrap_or_else(|| build_search(&config)) {
        Ok(s) => s,
        Err(e) => return RunOutcome::fail(&run_dir, ExitStatus::ConfigInvalid, e),
    };
    let prompts = match Prompts::load(config.paths.prompts_dir.as_deref()) {
        Ok(p) => p,
        Err(e) => return RunOutcome::fail(&run_dir, ExitStatus::ConfigInvalid, format!("prompts: {e}")),
    };
    let task = match fs::read_to_string(bundle.join("task.md")) {
        Ok(t) => t,
        Err(e) => return RunOutcome::fail(&run_dir, ExitStatus::ConfigInvalid, format!("task.md: {e}")),
    };
    if let Err(e) = fs::create_dir_all(&run_dir) {
        return RunOutcome::fail(&run_dir, ExitStatus::Other, format!("{}: {e}", run_dir.display()));
    }
    let staged = match persist_inputs(&run_dir, bundle, &config, pack.as_ref(), &prompts) {
        Ok(b) => b,
        Err(e) => return RunOutcome::fail(&run_dir, ExitStatus::Other, e),
    };
    let sink = match TranscriptSink::create(run_dir.join(TRANSCRIPT)) {
        Ok(s) => Arc::new(s),
        Err(e) => return RunOutcome::fail(&run_dir, ExitStatus::Other, format!("transcript: {e}")),
    };
    let mut budget = Budget::from_config(&config);
    budget.started_at = sink.opened_at();
    let workspace = match init_repositories(&run_dir, config.repos_n, &staged, config.data_copy) {
        Ok(w) => w,
        Err(e) => return RunOutcome::fail(&run_dir, ExitStatus::Other, e.to_string()),
    };
    let mode = backend.mode();
    let mut ctx = RunContext::new(config, workspace, backend, sink.clone(), task, budget);
    ctx.search = search;
    ctx.prompts = prompts;
    ctx.event(
        "run",
        json!({
            "phase": "start",
            "mode": mode,
            "repos_n": ctx.config.repos_n,
            "parallelism": ctx.config.limits.parallelism,
            "total_ms": ctx.budget.total.as_millis() as u64,
            "config_digest": content_digest(ctx.config.to_string()),
            "bundle_digest": tree_digest(&staged),
            "prompts": ctx.prompts.digests(),
        }),
    );

    let mut outcome = run_phases(&mut ctx, &run_dir, &staged, options.runner.as_deref());
    if let Some(s) = &outcome.submission {
        let body = json!({
            "repo": ctx.workspace.aggregator_repo().index,
            "predictions_path": format!("repos/repo_{}/{}", ctx.workspace.aggregator_repo().index, s.predictions_path),
            "inference_command": s.inference_command,
            "decision": s.decision,
        });
        if let Err(e) = fs::write(run_dir.join(SUBMISSION), serde_json::to_string_pretty(&body).expect("json") + "\n") {
            outcome.diagnostics.push(format!("submission.json: {e}"));
        }
    }
    ctx.event(
        "run",
        json!({
            "phase": "end",
            "exit_code": outcome.status.code(),
            "status": outcome.status.word(),
            "elapsed_ms": ctx.budget.elapsed().as_millis() as u64,
            "diagnostics": outcome.diagnostics,
        }),
    );
    sink.close();
    outcome
}

fn run_phases(ctx: &mut RunContext, run_dir: &Path, bundle: &Path, runner: Option<&dyn SubAgentRunner>) -> RunOutcome {
    let fail = |status, d: String| RunOutcome::fail(run_dir, status, d);
    let setup = match run_setup(ctx, run_dir, bundle, ctx.budget.work_deadline()) {
        Ok(r) => r,
        Err(e) => return fail(ExitStatus::Other, e.to_string()),
    };
    if let Some(m) = fault_status(ctx) {
        return fail(ExitStatus::ProviderFault, format!("setup: {m}"));
    }
    match setup.status {
        SetupStatus::Ok => ctx.activation_prefix = setup.activation_prefix.clone(),
        SetupStatus::SetupFailed => {
            let cmd = setup.failed_command.unwrap_or_default();
            let tail = setup.stderr_tail.unwrap_or_default();
            return fail(ExitStatus::SetupFailed, format!("setup failed at `{cmd}`: {}", tail.trim_end()));
        }
        SetupStatus::BudgetExhausted => return fail(ExitStatus::BudgetExhausted, "budget exhausted during setup".into()),
        SetupStatus::Error => return fail(ExitStatus::Other, format!("setup error: {}", setup.summary)),
    }

    let ctx: &RunContext = ctx;
    let state = run_manager(ctx, runner.unwrap_or(&EngineRunner));
    if let Some(m) = fault_status(ctx) {
        return fail(ExitStatus::ProviderFault, m);
    }
    let mut diagnostics = Vec::new();
    if let Some(cause) = state.stop_cause() {
        if cause != StopCause::ManagerCompleted {
            diagnostics.push(format!("manager stopped: {cause:?}"));
        }
    }
    match run_aggregator(ctx, run_dir, ctx.budget.remaining()) {
        Ok(s) => {
            if let Some(m) = fault_status(ctx) {
                return fail(ExitStatus::ProviderFault, format!("aggregator: {m}"));
            }
            RunOutcome { status: ExitStatus::Ok, run_dir: run_dir.to_path_buf(), submission: Some(s), diagnostics }
        }
        Err(LifecycleError::NoValidCandidates) => {
            let status = if state.stop_cause() == Some(StopCause::BudgetExhausted) || ctx.budget.remaining().is_zero() {
                ExitStatus::BudgetExhausted
            } else {
                ExitStatus::NoValidCandidates
            };
            diagnostics.push("no repository holds a valid result manifest with predictions".into());
            RunOutcome { status, run_dir: run_dir.to_path_buf(), submission: None, diagnostics }
        }
        Err(e) => {
            diagnostics.push(e.to_string());
            RunOutcome { status: ExitStatus::Other, run_dir: run_dir.to_path_buf(), submission: None, diagnostics }
        }
    }
}

/// `run <bundle> --config <path>`.
pub fn cmd_run(bundle: &Path, config_path: &Path, run_dir: Option<&Path>) -> RunOutcome {
    let fallback = run_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("run"));
    let mut config = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return RunOutcome::fail(&fallback, ExitStatus::ConfigInvalid, e.to_string()),
    };
    if let Some(dir) = run_dir {
        config.paths.run_dir = dir.to_path_buf();
    }
    execute_run(bundle, config, RunOptions::default())
}
