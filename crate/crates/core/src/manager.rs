//! The manager: a top-level agent whose tools delegate to sub-agents on
//! numbered repositories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{run_agent, AgentSpec, AgentStatus, ToolFailure, ToolHost, ToolOutput};
use crate::context::RunContext;
use crate::provider::{Arguments, ToolCall};
use crate::subagents::{run_subagent, SubAgentKind, SubAgentReport, SubAgentRequest};
use crate::tools;
use crate::workspace::{read_artifact, read_manifest, RepoStatus, Repository, WorkspaceError};

pub const STATUS_DIGEST_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionTool {
    Designer,
    Coder,
    Tuner,
    Read,
    Prune,
}

impl DecisionTool {
    fn subagent(self) -> Option<SubAgentKind> {
        match self {
            Self::Designer => Some(SubAgentKind::Designer),
            Self::Coder => Some(SubAgentKind::Coder),
            Self::Tuner => Some(SubAgentKind::Tuner),
            Self::Read | Self::Prune => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerDecision {
    pub tool: DecisionTool,
    pub repo_index: usize,
    pub arguments: Arguments,
}

impl ManagerDecision {
    /// Interprets a manager tool call against `n` candidate repositories.
    pub fn from_call(call: &ToolCall, n: usize) -> Result<Self, String> {
        let (base, repo_index) =
            tools::split_scoped(&call.name).ok_or_else(|| format!("not a manager tool: {}", call.name))?;
        let tool = match base {
            "designer" => DecisionTool::Designer,
            "coder" => DecisionTool::Coder,
            "tuner" => DecisionTool::Tuner,
            "read" => DecisionTool::Read,
            "prune" => DecisionTool::Prune,
            _ => return Err(format!("not a manager tool: {}", call.name)),
        };
        let d = Self { tool, repo_index, arguments: call.args.clone() };
        d.validate(n)?;
        Ok(d)
    }

    pub fn validate(&self, n: usize) -> Result<(), String> {
        if self.repo_index < 1 || self.repo_index > n {
            return Err(format!("repository {} does not exist (1..{n})", self.repo_index));
        }
        if self.tool == DecisionTool::Tuner {
            match self.arguments.get("tuning_budget").and_then(|v| v.as_f64()) {
                Some(b) if b.is_finite() && b > 0.0 => {}
                _ => return Err("tuning_budget must be a positive number of seconds".into()),
            }
        }
        Ok(())
    }

    pub fn request(&self) -> Option<SubAgentRequest> {
        Some(SubAgentRequest {
            kind: self.tool.subagent()?,
            repo_index: self.repo_index,
            tuning_budget: self.arguments.get("tuning_budget").and_then(|v| v.as_f64()),
            instructions: self.arguments.get("instructions").and_then(|v| v.as_str()).map(String::from),
        })
    }

    pub fn label(&self) -> String {
        let base = match self.tool {
            DecisionTool::Designer => "designer",
            DecisionTool::Coder => "coder",
            DecisionTool::Tuner => "tuner",
            DecisionTool::Read => "read",
            DecisionTool::Prune => "prune",
        };
        tools::scoped(base, self.repo_index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopCause {
    BudgetExhausted,
    ManagerCompleted,
    StepLimit,
    ProviderDead,
    ToolFailure,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DispatchError {
    #[error("decision conflict: repository {0} targeted more than once or already busy")]
    DecisionConflict(usize),
    #[error("overcommit: {requested} decision(s) with {inflight} in flight exceed the limit of {limit}")]
    Overcommit { requested: usize, inflight: usize, limit: usize },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PruneError {
    #[error("repository {0} is already pruned")]
    AlreadyPruned(usize),
    #[error("repository {0} is busy")]
    RepoBusy(usize),
    #[error("repository {0} does not exist")]
    UnknownRepo(usize),
}

/// Mutable state of the manager phase. Updated at dispatch join points.
#[derive(Debug, Default)]
pub struct RunState {
    reports: Mutex<Vec<SubAgentReport>>,
    inflight: Mutex<BTreeSet<(usize, SubAgentKind)>>,
    peak_inflight: AtomicUsize,
    stop_cause: Mutex<Option<StopCause>>,
    manager_calls: AtomicUsize,
}

impl RunState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reports(&self) -> Vec<SubAgentReport> {
        self.reports.lock().unwrap().clone()
    }

    pub fn inflight(&self) -> BTreeSet<(usize, SubAgentKind)> {
        self.inflight.lock().unwrap().clone()
    }

    pub fn peak_inflight(&self) -> usize {
        self.peak_inflight.load(Ordering::SeqCst)
    }

    pub fn stop_cause(&self) -> Option<StopCause> {
        *self.stop_cause.lock().unwrap()
    }

    pub fn manager_calls(&self) -> usize {
        self.manager_calls.load(Ordering::SeqCst)
    }

    fn is_inflight(&self, repo: usize) -> bool {
        self.inflight.lock().unwrap().iter().any(|(r, _)| *r == repo)
    }
}

/// Executes sub-agent requests. The engine uses [`EngineRunner`]; tests
/// substitute instrumented runners.
pub trait SubAgentRunner: Sync {
    fn run(&self, ctx: &RunContext, request: &SubAgentRequest, deadline: Instant) -> SubAgentReport;
}

pub struct EngineRunner;

impl SubAgentRunner for EngineRunner {
    fn run(&self, ctx: &RunContext, request: &SubAgentRequest, deadline: Instant) -> SubAgentReport {
        run_subagent(ctx, request, deadline)
    }
}

impl<F> SubAgentRunner for F
where
    F: Fn(&RunContext, &SubAgentRequest, Instant) -> SubAgentReport + Sync,
{
    fn run(&self, ctx: &RunContext, request: &SubAgentRequest, deadline: Instant) -> SubAgentReport {
        self(ctx, request, deadline)
    }
}

/// Launches all decisions concurrently and joins them. Reports come back
/// ordered by repository index and are appended to `state`.
pub fn dispatch(
    ctx: &RunContext,
    state: &RunState,
    decisions: &[ManagerDecision],
    runner: &dyn SubAgentRunner,
) -> Result<Vec<SubAgentReport>, DispatchError> {
    if decisions.is_empty() {
        return Ok(Vec::new());
    }
    let n = ctx.workspace.candidate_count();
    let mut requests = Vec::with_capacity(decisions.len());
    let mut seen = BTreeSet::new();
    for d in decisions {
        d.validate(n).map_err(DispatchError::InvalidDecision)?;
        let request = d
            .request()
            .ok_or_else(|| DispatchError::InvalidDecision(format!("{} is not a sub-agent call", d.label())))?;
        if !seen.insert(d.repo_index) {
            return Err(DispatchError::DecisionConflict(d.repo_index));
        }
        requests.push(request);
    }
    let limit = ctx.config.limits.parallelism;
    {
        let mut inflight = state.inflight.lock().unwrap();
        if let Some(busy) = requests.iter().find(|r| inflight.iter().any(|(i, _)| *i == r.repo_index)) {
            return Err(DispatchError::DecisionConflict(busy.repo_index));
        }
        if inflight.len() + requests.len() > limit {
            return Err(DispatchError::Overcommit { requested: requests.len(), inflight: inflight.len(), limit });
        }
        for r in &requests {
            inflight.insert((r.repo_index, r.kind));
        }
        state.peak_inflight.fetch_max(inflight.len(), Ordering::SeqCst);
    }
    for d in decisions {
        ctx.event("decision", json!({"tool": d.label(), "repo": d.repo_index, "arguments": d.arguments}));
    }

    let deadline = ctx.budget.work_deadline();
    let mut reports: Vec<SubAgentReport> = std::thread::scope(|s| {
        let handles: Vec<_> = requests
            .iter()
            .map(|r| {
                s.spawn(move || {
                    let report = runner.run(ctx, r, deadline);
                    state.inflight.lock().unwrap().remove(&(r.repo_index, r.kind));
                    report
                })
            })
            .collect();
        handles
            .into_iter()
            .zip(&requests)
            .map(|(h, r)| {
                h.join().unwrap_or_else(|_| {
                    state.inflight.lock().unwrap().remove(&(r.repo_index, r.kind));
                    crate::subagents::panic_report(r)
                })
            })
            .collect()
    });
    reports.sort_by_key(|r| r.repo_index);
    let mut all = state.reports.lock().unwrap();
    for r in &reports {
        ctx.event("report", json!({"repo": r.repo_index, "report": r}));
        all.push(r.clone());
    }
    Ok(reports)
}

/// Marks a repository pruned. Its files stay readable.
pub fn mark_pruned(ctx: &RunContext, state: &RunState, repo_index: usize) -> Result<(), PruneError> {
    let repo = ctx
        .workspace
        .repo(repo_index)
        .filter(|_| repo_index <= ctx.workspace.candidate_count())
        .ok_or(PruneError::UnknownRepo(repo_index))?;
    if repo.status() != RepoStatus::Active {
        return Err(PruneError::AlreadyPruned(repo_index));
    }
    if state.is_inflight(repo_index) || repo.lease_holder().is_some() {
        return Err(PruneError::RepoBusy(repo_index));
    }
    repo.set_status(RepoStatus::Pruned);
    ctx.event("prune", json!({"repo": repo_index}));
    Ok(())
}

/// One line per repository: status, plan, code verification and latest
/// metric. At most [`STATUS_DIGEST_CAP`] bytes.
pub fn summarize_status(repos: &[Arc<Repository>]) -> String {
    let mut out = String::new();
    for (k, repo) in repos.iter().enumerate() {
        let status = match repo.status() {
            RepoStatus::Active => "active",
            RepoStatus::Pruned => "pruned",
            RepoStatus::Failed => "failed",
        };
        let plan = if repo.exists("plan.md") { "plan" } else { "no plan" };
        let code = if repo.code_verified() { "code verified" } else { "code unverified" };
        let mut line = format!("repo {}: {status}, {plan}, {code}", repo.index);
        if repo.status() != RepoStatus::Pruned {
            match read_manifest(repo) {
                Ok(m) => {
                    let _ = write!(
                        line,
                        ", {}={}{}, runs={}",
                        m.metric_name,
                        m.metric_value,
                        m.direction.arrow(),
                        m.runs_completed
                    );
                }
                Err(_) => line.push_str(", no result"),
            }
        }
        line.push('\n');
        if out.len() + line.len() > STATUS_DIGEST_CAP {
            let tail = format!("... {} more repositories\n", repos.len() - k);
            while out.len() + tail.len() > STATUS_DIGEST_CAP {
                let cut = out.trim_end_matches('\n').rfind('\n').map(|p| p + 1).unwrap_or(0);
                out.truncate(cut);
            }
            out.push_str(&tail);
            break;
        }
        out.push_str(&line);
    }
    out
}

struct ManagerHost<'a> {
    ctx: &'a RunContext,
    state: &'a RunState,
    runner: &'a dyn SubAgentRunner,
}

type Slot = Option<Result<ToolOutput, ToolFailure>>;

impl ManagerHost<'_> {
    /// Dispatches the pending wave and fills its result slots. Returns the
    /// position of a call that must abort the manager loop, if any.
    fn flush(&self, wave: &mut Vec<(usize, ManagerDecision)>, results: &mut [Slot]) -> Option<usize> {
        let last = wave.last()?.0;
        let decisions: Vec<ManagerDecision> = wave.iter().map(|(_, d)| d.clone()).collect();
        match dispatch(self.ctx, self.state, &decisions, self.runner) {
            Ok(reports) => {
                for (pos, d) in wave.iter() {
                    let report = reports.iter().find(|r| r.repo_index == d.repo_index).expect("one report per decision");
                    results[*pos] = Some(Ok(ToolOutput::text(report.render())));
                }
            }
            Err(e) => {
                for (pos, _) in wave.iter() {
                    results[*pos] = Some(Ok(ToolOutput::text(e.to_string())));
                }
            }
        }
        wave.clear();
        if self.ctx.script_broken() {
            results[last] =
                Some(Err(ToolFailure { tool: "provider".into(), reason: "scripted fixture desynchronized".into() }));
            return Some(last);
        }
        None
    }

    fn inline(&self, d: &ManagerDecision) -> Result<ToolOutput, ToolFailure> {
        let repo = self.ctx.workspace.repo(d.repo_index).expect("validated index");
        match d.tool {
            DecisionTool::Read => {
                let path = d.arguments.get("path").and_then(|v| v.as_str()).unwrap_or(".");
                match read_artifact(repo, path) {
                    Ok(text) => Ok(ToolOutput::text(text)),
                    Err(e @ WorkspaceError::PathEscape(_)) => {
                        Err(ToolFailure { tool: d.label(), reason: e.to_string() })
                    }
                    Err(e) => Ok(ToolOutput::text(e.to_string())),
                }
            }
            DecisionTool::Prune => Ok(ToolOutput::text(match mark_pruned(self.ctx, self.state, d.repo_index) {
                Ok(()) => format!("repository {} pruned", d.repo_index),
                Err(e) => e.to_string(),
            })),
            _ => unreachable!("sub-agent decisions are dispatched"),
        }
    }
}

impl ToolHost for ManagerHost<'_> {
    fn execute(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        self.execute_batch(&[call]).pop().expect("one result")
    }

    /// Consecutive sub-agent calls on distinct repositories form one
    /// concurrent wave (at most P). A read or prune call, or a repeated
    /// repository, closes the current wave first.
    fn execute_batch(&self, calls: &[&ToolCall]) -> Vec<Result<ToolOutput, ToolFailure>> {
        let n = self.ctx.workspace.candidate_count();
        let limit = self.ctx.config.limits.parallelism;
        let mut results: Vec<Slot> = vec![None; calls.len()];
        let mut wave: Vec<(usize, ManagerDecision)> = Vec::new();
        let mut failure: Option<usize> = None;
        for (pos, call) in calls.iter().enumerate() {
            let d = match ManagerDecision::from_call(call, n) {
                Ok(d) => d,
                Err(text) => {
                    results[pos] = Some(Ok(ToolOutput::text(text)));
                    continue;
                }
            };
            let joins_wave = d.tool.subagent().is_some();
            let must_flush =
                !joins_wave || wave.len() >= limit || wave.iter().any(|(_, w)| w.repo_index == d.repo_index);
            if must_flush {
                failure = self.flush(&mut wave, &mut results);
                if failure.is_some() {
                    break;
                }
            }
            if joins_wave {
                wave.push((pos, d));
                continue;
            }
            let r = self.inline(&d);
            let failed = r.is_err();
            results[pos] = Some(r);
            if failed {
                failure = Some(pos);
                break;
            }
        }
        if failure.is_none() {
            failure = self.flush(&mut wave, &mut results);
        }
        let end = failure.map_or(results.len(), |p| p + 1);
        results
            .into_iter()
            .take(end)
            .map(|r| r.unwrap_or_else(|| Ok(ToolOutput::text("skipped: an earlier tool call failed"))))
            .collect()
    }
}

pub fn manager_tools(n: usize) -> Vec<String> {
    (1..=n)
        .flat_map(|i| ["designer", "coder", "tuner", "read", "prune"].map(|b| tools::scoped(b, i)))
        .collect()
}

fn manager_input(ctx: &RunContext) -> String {
    let n = ctx.workspace.candidate_count();
    let mut s = format!("# Task\n\n{}\n\n# Run\n\n", ctx.task.trim_end());
    let _ = writeln!(s, "Repositories: 1..{n}");
    let _ = writeln!(s, "Parallel sub-agents: at most {}", ctx.config.limits.parallelism);
    let _ = writeln!(s, "Total budget: {} seconds", ctx.config.budget.total_seconds);
    let _ = write!(s, "\n# Status\n\n{}", summarize_status(ctx.workspace.candidates()));
    s
}

/// Drives the manager agent until it completes, runs out of steps or budget,
/// or its provider fails.
pub fn run_manager(ctx: &RunContext, runner: &dyn SubAgentRunner) -> RunState {
    let state = RunState::new();
    let n = ctx.workspace.candidate_count();
    let spec = AgentSpec::new("manager", ctx.prompts.manager.clone(), manager_tools(n))
        .with_limits(ctx.config.limits.agent_steps_manager, ctx.config.limits.observation_cap)
        .with_model(ctx.model());
    let host = ManagerHost { ctx, state: &state, runner };
    let outcome = run_agent(&spec, &manager_input(ctx), &host, ctx.env(), ctx.budget.work_deadline());
    state.manager_calls.store(outcome.provider_calls as usize, Ordering::SeqCst);
    if let Some(e) = &outcome.provider_error {
        ctx.record_fault(e.clone());
    }
    let cause = match outcome.status {
        _ if outcome.provider_error.is_some() || ctx.script_broken() => StopCause::ProviderDead,
        AgentStatus::Completed => StopCause::ManagerCompleted,
        AgentStatus::StepLimit => StopCause::StepLimit,
        AgentStatus::BudgetExhausted => StopCause::BudgetExhausted,
        AgentStatus::ToolFailure => StopCause::ToolFailure,
    };
    *state.stop_cause.lock().unwrap() = Some(cause);
    ctx.event(
        "budget",
        json!({
            "phase": "manager_end",
            "stop_cause": cause,
            "elapsed_ms": ctx.budget.elapsed().as_millis() as u64,
            "total_ms": ctx.budget.total.as_millis() as u64,
            "manager_calls": outcome.provider_calls,
            "diagnostic": outcome.diagnostic,
        }),
    );
    state
}
