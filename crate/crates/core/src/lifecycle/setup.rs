use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{claim_once, LifecycleError};
use crate::agent::{run_agent, AgentSpec, AgentStatus, ToolFailure, ToolHost, ToolOutput};
use crate::context::{clip, RunContext};
use crate::provider::ToolCall;
use crate::tools::{ACTIVATE, EXECUTE, READ};
use crate::workspace::{copy_tree, exec_program, read_artifact, DataCopyMode, Repository, WorkspaceError};

pub const SETUP_MARKER: &str = ".setup_done";
pub const SETUP_DIR: &str = "setup";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetupPlan {
    pub provisioning_commands: Vec<String>,
    pub environment_name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupStatus {
    Ok,
    SetupFailed,
    BudgetExhausted,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupReport {
    pub status: SetupStatus,
    pub plan: SetupPlan,
    pub activation_prefix: String,
    pub failed_command: Option<String>,
    pub stderr_tail: Option<String>,
    pub summary: String,
    pub provider_calls: u32,
}

struct Attempt {
    command: String,
    ok: bool,
    stderr_tail: String,
}

struct SetupHost<'a> {
    ctx: &'a RunContext,
    repo: &'a Repository,
    deadline: Instant,
    prefix: Mutex<String>,
    environment: Mutex<Option<String>>,
    attempts: Mutex<Vec<Attempt>>,
}

impl ToolHost for SetupHost<'_> {
    fn execute(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        let escape = |e: WorkspaceError| match e {
            WorkspaceError::PathEscape(_) => Err(ToolFailure { tool: call.name.clone(), reason: e.to_string() }),
            other => Ok(ToolOutput::text(other.to_string())),
        };
        match call.name.as_str() {
            READ => match read_artifact(self.repo, call.str_arg("path").unwrap_or(".")) {
                Ok(text) => Ok(ToolOutput::text(text)),
                Err(e) => escape(e),
            },
            ACTIVATE => {
                let prefix = call.str_arg("prefix").unwrap_or("").trim().to_string();
                if prefix.is_empty() {
                    return Ok(ToolOutput::text("activation prefix must be non-empty"));
                }
                *self.environment.lock().unwrap() = call.str_arg("environment").map(String::from);
                *self.prefix.lock().unwrap() = prefix.clone();
                Ok(ToolOutput::text(format!("activation prefix recorded: {prefix}")))
            }
            EXECUTE => {
                let command = call.str_arg("command").unwrap_or("");
                let remaining = self.deadline.saturating_duration_since(Instant::now());
                if remaining.is_zero() {
                    return Ok(ToolOutput::text("budget exhausted: command not started"));
                }
                let timeout = call
                    .f64_arg("timeout")
                    .filter(|t| t.is_finite() && *t > 0.0)
                    .map(std::time::Duration::from_secs_f64)
                    .unwrap_or(remaining)
                    .min(remaining);
                let mut settings = self.ctx.exec_settings();
                settings.activation_prefix = self.prefix.lock().unwrap().clone();
                let record = match exec_program(self.repo, "setup", command, timeout, &BTreeMap::new(), &settings) {
                    Ok(r) => r,
                    Err(e) => return escape(e),
                };
                self.ctx.event(
                    "exec",
                    json!({
                        "agent": "setup",
                        "repo": 0,
                        "command": record.command,
                        "exit_code": record.exit_code,
                        "timed_out": record.timed_out,
                        "smoke": false,
                        "duration_ms": (record.duration * 1000.0) as u64,
                    }),
                );
                self.attempts.lock().unwrap().push(Attempt {
                    command: record.command.clone(),
                    ok: record.succeeded(),
                    stderr_tail: record.stderr_tail.clone(),
                });
                Ok(ToolOutput { payload: record.render(), exit_status: record.exit_code })
            }
            other => Err(ToolFailure { tool: other.into(), reason: "not served by the setup host".into() }),
        }
    }
}

/// Runs the setup agent in `<run_dir>/setup`, which holds the bundle minus
/// its data. At most once per run directory.
pub fn run_setup(
    ctx: &RunContext,
    run_dir: &Path,
    bundle: &Path,
    deadline: Instant,
) -> Result<SetupReport, LifecycleError> {
    claim_once(run_dir, SETUP_MARKER, "setup")?;
    let dir = run_dir.join(SETUP_DIR);
    fs::create_dir_all(&dir).map_err(|e| LifecycleError::Io(e.to_string()))?;
    let mut entries: Vec<_> = fs::read_dir(bundle)
        .map_err(|e| LifecycleError::Io(e.to_string()))?
        .filter_map(Result::ok)
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name();
        if name == "data" {
            continue;
        }
        let to = dir.join(&name);
        let result = if entry.path().is_dir() {
            copy_tree(&entry.path(), &to, DataCopyMode::Copy).map_err(|e| e.to_string())
        } else {
            fs::copy(entry.path(), &to).map(|_| ()).map_err(|e| e.to_string())
        };
        result.map_err(LifecycleError::Io)?;
    }
    let repo = Repository::open(0, &dir).map_err(|e| LifecycleError::Io(e.to_string()))?;
    let _lease = repo.acquire_lease("setup").map_err(|e| LifecycleError::Io(e.to_string()))?;

    let spec = AgentSpec::new("setup", ctx.prompts.setup.clone(), [READ, EXECUTE, ACTIVATE])
        .with_limits(ctx.config.limits.agent_steps_subagent, ctx.config.limits.observation_cap)
        .with_model(ctx.model());
    let host = SetupHost {
        ctx,
        repo: &repo,
        deadline,
        prefix: Mutex::new(String::new()),
        environment: Mutex::new(None),
        attempts: Mutex::new(Vec::new()),
    };
    let input = format!("# Task\n\n{}\n\nThe working directory holds task.md and the other bundle files.\n", ctx.task.trim_end());
    let outcome = run_agent(&spec, &input, &host, ctx.env(), deadline);
    if let Some(e) = &outcome.provider_error {
        ctx.record_fault(e.clone());
    }

    let attempts = host.attempts.into_inner().unwrap();
    let unresolved = attempts.iter().enumerate().find(|(i, a)| {
        !a.ok && !attempts[i + 1..].iter().any(|later| later.ok && later.command == a.command)
    });
    let mut commands: Vec<String> = Vec::new();
    for a in &attempts {
        if !commands.contains(&a.command) {
            commands.push(a.command.clone());
        }
    }
    let (status, failed_command, stderr_tail) = match (outcome.status, unresolved) {
        (AgentStatus::ToolFailure, _) => (SetupStatus::Error, None, None),
        (_, Some((_, a))) => (SetupStatus::SetupFailed, Some(a.command.clone()), Some(a.stderr_tail.clone())),
        (AgentStatus::BudgetExhausted, None) => (SetupStatus::BudgetExhausted, None, None),
        _ => (SetupStatus::Ok, None, None),
    };
    let report = SetupReport {
        status,
        plan: SetupPlan { provisioning_commands: commands, environment_name: host.environment.into_inner().unwrap() },
        activation_prefix: if status == SetupStatus::Ok { host.prefix.into_inner().unwrap() } else { String::new() },
        failed_command,
        stderr_tail,
        summary: clip(
            &outcome.diagnostic.clone().map_or_else(|| outcome.final_text.clone(), |d| format!("{d}\n{}", outcome.final_text)),
            2048,
        ),
        provider_calls: outcome.provider_calls,
    };
    ctx.event("setup", serde_json::to_value(&report).expect("setup report serializes"));
    Ok(report)
}
