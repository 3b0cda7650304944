//! Designer, coder and tuner: agents bound to one repository with restricted
//! tool views and postconditions checked by the engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{run_agent, AgentOutcome, AgentSpec, AgentStatus, ToolFailure, ToolHost, ToolOutput};
use crate::context::{clip, RunContext};
use crate::digest::content_digest;
use crate::provider::ToolCall;
use crate::tools::{self, EXECUTE, READ, SEARCH, WRITE};
use crate::workspace::{
    exec_program, read_artifact, read_manifest, write_artifact, ArtifactKind, Direction, ManifestError,
    RepoStatus, Repository, WorkspaceError, MANIFEST_PATH,
};

pub const SUMMARY_CAP: usize = 2048;
/// Commands containing this flag are smoke runs.
pub const SMOKE_FLAG: &str = "--smoke";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubAgentKind {
    Designer,
    Coder,
    Tuner,
}

impl SubAgentKind {
    pub const ALL: [SubAgentKind; 3] = [Self::Designer, Self::Coder, Self::Tuner];

    pub fn base(self) -> &'static str {
        match self {
            Self::Designer => "designer",
            Self::Coder => "coder",
            Self::Tuner => "tuner",
        }
    }

    pub fn from_base(base: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.base() == base)
    }

    /// Agent label and fixture stream name, e.g. `coder_3`.
    pub fn label(self, repo_index: usize) -> String {
        tools::scoped(self.base(), repo_index)
    }

    pub fn tool_view(self) -> [&'static str; 3] {
        match self {
            Self::Designer => [READ, WRITE, SEARCH],
            Self::Coder | Self::Tuner => [READ, WRITE, EXECUTE],
        }
    }

    fn prompt(self, ctx: &RunContext) -> &str {
        match self {
            Self::Designer => &ctx.prompts.designer,
            Self::Coder => &ctx.prompts.coder,
            Self::Tuner => &ctx.prompts.tuner,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    FailedVerification,
    MissingPrerequisite,
    BudgetExhausted,
    Error,
}

impl ReportStatus {
    pub fn word(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::FailedVerification => "failed_verification",
            Self::MissingPrerequisite => "missing_prerequisite",
            Self::BudgetExhausted => "budget_exhausted",
            Self::Error => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub name: String,
    pub value: f64,
    pub direction: Direction,
}

impl MetricSnapshot {
    pub fn render(&self) -> String {
        format!("{}={}{}", self.name, self.value, self.direction.arrow())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubAgentReport {
    pub kind: SubAgentKind,
    pub repo_index: usize,
    pub status: ReportStatus,
    pub summary: String,
    pub artifacts_touched: Vec<String>,
    pub duration: f64,
    pub debug_iterations: u32,
    pub runs_launched: u32,
    pub metric: Option<MetricSnapshot>,
    pub provider_calls: u32,
}

impl SubAgentReport {
    fn bare(kind: SubAgentKind, repo_index: usize, status: ReportStatus, summary: impl Into<String>) -> Self {
        Self {
            kind,
            repo_index,
            status,
            summary: clip(&summary.into(), SUMMARY_CAP),
            artifacts_touched: Vec::new(),
            duration: 0.0,
            debug_iterations: 0,
            runs_launched: 0,
            metric: None,
            provider_calls: 0,
        }
    }

    /// Observation text for the manager. Leaves out the duration so that
    /// replayed manager contexts are identical.
    pub fn render(&self) -> String {
        let mut s = format!("report from {}: {}\n", self.kind.label(self.repo_index), self.status.word());
        match self.kind {
            SubAgentKind::Coder => {
                let _ = writeln!(s, "debug_iterations: {}", self.debug_iterations);
            }
            SubAgentKind::Tuner => {
                let _ = writeln!(s, "runs_launched: {}", self.runs_launched);
            }
            SubAgentKind::Designer => {}
        }
        if let Some(m) = &self.metric {
            let _ = writeln!(s, "metric: {}", m.render());
        }
        if !self.artifacts_touched.is_empty() {
            let _ = writeln!(s, "artifacts: {}", self.artifacts_touched.join(", "));
        }
        s.push_str("summary:\n");
        s.push_str(&self.summary);
        s
    }
}

/// One sub-agent invocation as requested by the manager.
#[derive(Clone, Debug, PartialEq)]
pub struct SubAgentRequest {
    pub kind: SubAgentKind,
    pub repo_index: usize,
    pub tuning_budget: Option<f64>,
    pub instructions: Option<String>,
}

impl SubAgentRequest {
    pub fn new(kind: SubAgentKind, repo_index: usize) -> Self {
        Self { kind, repo_index, tuning_budget: None, instructions: None }
    }
}

pub fn run_designer(ctx: &RunContext, repo_index: usize, deadline: Instant) -> SubAgentReport {
    run_subagent(ctx, &SubAgentRequest::new(SubAgentKind::Designer, repo_index), deadline)
}

pub fn run_coder(ctx: &RunContext, repo_index: usize, deadline: Instant) -> SubAgentReport {
    run_subagent(ctx, &SubAgentRequest::new(SubAgentKind::Coder, repo_index), deadline)
}

pub fn run_tuner(ctx: &RunContext, repo_index: usize, tuning_budget: f64, deadline: Instant) -> SubAgentReport {
    let request = SubAgentRequest { tuning_budget: Some(tuning_budget), ..SubAgentRequest::new(SubAgentKind::Tuner, repo_index) };
    run_subagent(ctx, &request, deadline)
}

#[derive(Default)]
struct HostLog {
    touched: BTreeSet<String>,
    smoke_runs: u32,
    /// (exit 0, duration in ms) of the latest smoke run.
    last_smoke: Option<(bool, u64)>,
    /// Code or config changed after the latest smoke run.
    smoke_stale: bool,
    runs: u32,
    any_timeout: bool,
    urls: Vec<String>,
}

struct RepoHost<'a> {
    ctx: &'a RunContext,
    repo: &'a Arc<Repository>,
    kind: SubAgentKind,
    holder: String,
    deadline: Instant,
    log: Mutex<HostLog>,
}

fn relative_of(repo: &Repository, path: &str) -> String {
    repo.resolve(path)
        .ok()
        .and_then(|p| p.strip_prefix(repo.root()).ok().map(|r| r.to_string_lossy().into_owned()))
        .unwrap_or_else(|| path.to_string())
}

impl RepoHost<'_> {
    fn escape(&self, call: &ToolCall, e: WorkspaceError) -> Result<ToolOutput, ToolFailure> {
        match e {
            WorkspaceError::PathEscape(_) => Err(ToolFailure { tool: call.name.clone(), reason: e.to_string() }),
            other => Ok(ToolOutput::text(other.to_string())),
        }
    }

    fn read(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        let path = call.str_arg("path").unwrap_or(".");
        match read_artifact(self.repo, path) {
            Ok(text) => Ok(ToolOutput::text(text)),
            Err(e) => self.escape(call, e),
        }
    }

    fn write(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        let path = call.str_arg("path").unwrap_or("");
        let content = call.str_arg("content").unwrap_or("");
        let class = ArtifactKind::classify(path);
        if self.kind == SubAgentKind::Tuner && !matches!(class, Some(ArtifactKind::Config | ArtifactKind::Result)) {
            if let Err(e @ WorkspaceError::PathEscape(_)) = self.repo.resolve(path) {
                return self.escape(call, e);
            }
            return Ok(ToolOutput::text(format!(
                "write refused: the tuner may only write under config/ and result/ ({path})"
            )));
        }
        match write_artifact(self.repo, &self.holder, path, content) {
            Ok(()) => {
                let mut log = self.log.lock().unwrap();
                log.touched.insert(relative_of(self.repo, path));
                if matches!(class, Some(ArtifactKind::Code | ArtifactKind::Config)) {
                    log.smoke_stale = true;
                }
                Ok(ToolOutput::text(format!("wrote {} bytes to {path}", content.len())))
            }
            Err(e) => self.escape(call, e),
        }
    }

    fn execute(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        let command = call.str_arg("command").unwrap_or("");
        let smoke = command.contains(SMOKE_FLAG);
        let cap = self.ctx.config.limits.debug_attempts;
        if self.kind == SubAgentKind::Coder && smoke && self.log.lock().unwrap().smoke_runs >= cap {
            return Ok(ToolOutput::text(format!(
                "smoke run refused: debug attempt limit ({cap}) reached"
            )));
        }
        let remaining = self.deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Ok(ToolOutput::text("budget exhausted: command not started"));
        }
        let mut timeout = call
            .f64_arg("timeout")
            .filter(|t| t.is_finite() && *t > 0.0)
            .map(Duration::from_secs_f64)
            .unwrap_or(remaining)
            .min(remaining);
        if smoke {
            timeout = timeout.min(Duration::from_secs_f64(self.ctx.config.limits.smoke_timeout));
        }
        let settings = self.ctx.exec_settings();
        let record = match exec_program(self.repo, &self.holder, command, timeout, &BTreeMap::new(), &settings) {
            Ok(r) => r,
            Err(e) => return self.escape(call, e),
        };
        let millis = (record.duration * 1000.0) as u64;
        self.ctx.event(
            "exec",
            json!({
                "agent": self.holder,
                "repo": self.repo.index,
                "command": record.command,
                "exit_code": record.exit_code,
                "timed_out": record.timed_out,
                "smoke": smoke,
                "duration_ms": millis,
            }),
        );
        let mut log = self.log.lock().unwrap();
        log.touched.insert(record.stdout_log.clone());
        log.touched.insert(record.stderr_log.clone());
        log.any_timeout |= record.timed_out;
        match self.kind {
            SubAgentKind::Coder if smoke => {
                log.smoke_runs += 1;
                log.last_smoke = Some((record.succeeded(), millis));
                log.smoke_stale = false;
            }
            SubAgentKind::Tuner => log.runs += 1,
            _ => {}
        }
        Ok(ToolOutput { payload: record.render(), exit_status: record.exit_code })
    }

    fn search(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        let query = call.str_arg("query").unwrap_or("");
        match self.ctx.search.search(query) {
            Ok(results) if results.is_empty() => Ok(ToolOutput::text("no results")),
            Ok(results) => {
                let mut out = String::new();
                let mut log = self.log.lock().unwrap();
                for (i, r) in results.iter().enumerate() {
                    let _ = writeln!(out, "{}. {} <{}>\n   {}", i + 1, r.title, r.url, r.snippet);
                    if !log.urls.contains(&r.url) {
                        log.urls.push(r.url.clone());
                    }
                }
                Ok(ToolOutput::text(out))
            }
            Err(e) => Ok(ToolOutput::text(e.to_string())),
        }
    }
}

impl ToolHost for RepoHost<'_> {
    fn execute(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        match call.name.as_str() {
            READ => self.read(call),
            WRITE => self.write(call),
            EXECUTE => self.execute(call),
            SEARCH => self.search(call),
            other => Err(ToolFailure { tool: other.into(), reason: "not served by repository host".into() }),
        }
    }
}

fn user_input(ctx: &RunContext, request: &SubAgentRequest, revision: bool) -> String {
    let mut s = format!("# Task\n\n{}\n\n# Assignment\n\n", ctx.task.trim_end());
    let _ = writeln!(s, "You are {} working in repository {}.", request.kind.label(request.repo_index), request.repo_index);
    match request.kind {
        SubAgentKind::Designer if revision => {
            s.push_str("plan.md and result/manifest exist: revise the plan in light of the results and append a `## Revision` section.\n")
        }
        SubAgentKind::Designer => s.push_str("Write plan.md.\n"),
        SubAgentKind::Coder => {
            let _ = writeln!(
                s,
                "Implement plan.md in src/ and config/ and verify with a smoke run (at most {} smoke runs, {} s each).",
                ctx.config.limits.debug_attempts, ctx.config.limits.smoke_timeout
            );
        }
        SubAgentKind::Tuner => {
            let _ = writeln!(s, "Tuning budget: {} seconds.", request.tuning_budget.unwrap_or(0.0));
        }
    }
    if let Some(extra) = request.instructions.as_deref().filter(|t| !t.trim().is_empty()) {
        let _ = write!(s, "\n# Instructions from the manager\n\n{}\n", extra.trim_end());
    }
    s
}

/// Runs one sub-agent invocation on its repository and checks the
/// postconditions of its kind.
pub fn run_subagent(ctx: &RunContext, request: &SubAgentRequest, deadline: Instant) -> SubAgentReport {
    let started = Instant::now();
    let mut report = run_inner(ctx, request, deadline);
    report.duration = started.elapsed().as_secs_f64();
    report
}

fn run_inner(ctx: &RunContext, request: &SubAgentRequest, deadline: Instant) -> SubAgentReport {
    let kind = request.kind;
    let i = request.repo_index;
    let fail = |status, text: String| SubAgentReport::bare(kind, i, status, text);
    let Some(repo) = ctx.workspace.repo(i).filter(|_| i <= ctx.workspace.candidate_count()) else {
        return fail(ReportStatus::Error, format!("no candidate repository {i}"));
    };
    match repo.status() {
        RepoStatus::Active => {}
        RepoStatus::Pruned => return fail(ReportStatus::MissingPrerequisite, format!("repository {i} is pruned")),
        RepoStatus::Failed => return fail(ReportStatus::MissingPrerequisite, format!("repository {i} has failed")),
    }
    let mut deadline = deadline;
    match kind {
        SubAgentKind::Designer => {}
        SubAgentKind::Coder => {
            if !repo.exists("plan.md") {
                return fail(ReportStatus::MissingPrerequisite, "no plan.md; run the designer first".into());
            }
        }
        SubAgentKind::Tuner => {
            let budget = request.tuning_budget.unwrap_or(0.0);
            if !(budget.is_finite() && budget > 0.0) {
                return fail(ReportStatus::Error, "tuning_budget must be positive".into());
            }
            if !repo.has_files_under("src") || !repo.code_verified() {
                return fail(ReportStatus::MissingPrerequisite, "MissingCode: no verified code in src/; run the coder first".into());
            }
            deadline = deadline.min(Instant::now() + Duration::from_secs_f64(budget));
        }
    }
    let label = kind.label(i);
    let lease = match repo.acquire_lease(&label) {
        Ok(l) => l,
        Err(e) => return fail(ReportStatus::Error, e.to_string()),
    };

    let plan_before = read_artifact(repo, "plan.md").ok().map(content_digest);
    let revision = kind == SubAgentKind::Designer && plan_before.is_some() && repo.exists(MANIFEST_PATH);
    if kind == SubAgentKind::Coder {
        repo.set_code_verified(false);
    }

    let spec = AgentSpec::new(label.clone(), kind.prompt(ctx), kind.tool_view())
        .with_limits(ctx.config.limits.agent_steps_subagent, ctx.config.limits.observation_cap)
        .with_model(ctx.model());
    let host = RepoHost {
        ctx,
        repo,
        kind,
        holder: label.clone(),
        deadline,
        log: Mutex::new(HostLog::default()),
    };
    let outcome = run_agent(&spec, &user_input(ctx, request, revision), &host, ctx.env(), deadline);
    if let Some(e) = &outcome.provider_error {
        ctx.record_fault(e.clone());
    }
    let log = host.log.into_inner().unwrap();

    let mut report = SubAgentReport::bare(kind, i, ReportStatus::Ok, "");
    report.provider_calls = outcome.provider_calls;
    report.debug_iterations = log.smoke_runs;
    report.runs_launched = log.runs;
    let verdict = if outcome.status == AgentStatus::ToolFailure {
        Err((ReportStatus::Error, outcome.diagnostic.clone().unwrap_or_else(|| "agent failed".into())))
    } else {
        match kind {
            SubAgentKind::Designer => check_designer(repo, plan_before.as_deref(), revision),
            SubAgentKind::Coder => check_coder(ctx, repo, &log),
            SubAgentKind::Tuner => check_tuner(repo, &log, &outcome).map(|(text, m)| {
                report.metric = Some(m);
                text
            }),
        }
    };
    let mut touched = log.touched;
    let detail = match verdict {
        Ok(text) => {
            if kind == SubAgentKind::Designer && append_references(repo, &label, &log.urls) {
                touched.insert("plan.md".into());
            }
            text
        }
        Err((status, text)) => {
            report.status = if status != ReportStatus::Error && outcome.status == AgentStatus::BudgetExhausted {
                ReportStatus::BudgetExhausted
            } else {
                status
            };
            text
        }
    };
    drop(lease);
    report.artifacts_touched = touched.into_iter().collect();
    let final_text = outcome.final_text.trim();
    let summary = if final_text.is_empty() { detail } else { format!("{detail}\n{final_text}") };
    report.summary = clip(&summary, SUMMARY_CAP);
    report
}

type Verdict = Result<String, (ReportStatus, String)>;

fn check_designer(repo: &Repository, before: Option<&str>, revision: bool) -> Verdict {
    let failed = |t: &str| Err((ReportStatus::FailedVerification, t.to_string()));
    let plan = match read_artifact(repo, "plan.md") {
        Ok(p) if !p.trim().is_empty() => p,
        _ => return failed("plan.md missing or empty"),
    };
    if revision {
        if before == Some(content_digest(&plan).as_str()) {
            return failed("plan.md was not revised");
        }
        if !plan.contains("## Revision") {
            return failed("revised plan.md lacks a `## Revision` section");
        }
        return Ok(format!("plan.md revised ({} bytes)", plan.len()));
    }
    Ok(format!("plan.md written ({} bytes)", plan.len()))
}

fn check_coder(ctx: &RunContext, repo: &Repository, log: &HostLog) -> Verdict {
    let failed = |t: String| Err((ReportStatus::FailedVerification, t));
    let cap = ctx.config.limits.debug_attempts;
    match log.last_smoke {
        None => return failed("no smoke run was executed".into()),
        Some((false, _)) if log.smoke_runs >= cap => {
            return failed(format!("smoke run still failing after {} attempt(s); debug limit reached", log.smoke_runs))
        }
        Some((false, _)) => return failed("last smoke run failed".into()),
        Some((true, _)) if log.smoke_stale => return failed("code changed after the last smoke run".into()),
        Some((true, _)) => {}
    }
    if !repo.has_files_under("src") || !repo.has_files_under("config") {
        return failed("src/ and config/ must both be non-empty".into());
    }
    let (_, millis) = log.last_smoke.expect("checked above");
    repo.set_code_verified(true);
    repo.set_smoke_millis(millis);
    Ok(format!("smoke run passed after {} attempt(s)", log.smoke_runs))
}

fn check_tuner(repo: &Repository, log: &HostLog, outcome: &AgentOutcome) -> Result<(String, MetricSnapshot), (ReportStatus, String)> {
    match read_manifest(repo) {
        Ok(_) if log.runs == 0 => Err((ReportStatus::FailedVerification, "no training run was launched".into())),
        Ok(m) => {
            let snap = MetricSnapshot { name: m.metric_name.clone(), value: m.metric_value, direction: m.direction };
            Ok((format!("manifest: {} after {} run(s)", snap.render(), log.runs), snap))
        }
        Err(ManifestError::NoManifest) if log.any_timeout || outcome.status == AgentStatus::BudgetExhausted => {
            Err((ReportStatus::BudgetExhausted, "no run completed within the tuning budget".into()))
        }
        Err(e) => Err((ReportStatus::FailedVerification, e.to_string())),
    }
}

/// Appends search URLs the plan does not cite yet. Returns whether plan.md
/// changed.
fn append_references(repo: &Repository, holder: &str, urls: &[String]) -> bool {
    let Ok(plan) = read_artifact(repo, "plan.md") else { return false };
    let fresh: Vec<&String> = urls.iter().filter(|u| !plan.contains(u.as_str())).collect();
    if fresh.is_empty() {
        return false;
    }
    let mut text = plan.trim_end().to_string();
    if !text.contains("## References") {
        text.push_str("\n\n## References\n");
    }
    text.push('\n');
    for url in fresh {
        let _ = writeln!(text, "- {url}");
    }
    write_artifact(repo, holder, "plan.md", &text).is_ok()
}

/// Report for an invocation whose thread panicked.
pub(crate) fn panic_report(request: &SubAgentRequest) -> SubAgentReport {
    SubAgentReport::bare(request.kind, request.repo_index, ReportStatus::Error, "sub-agent panicked")
}
