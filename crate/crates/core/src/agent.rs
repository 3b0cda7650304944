//! The generic tool-calling control loop shared by every agent.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{
    self, Message, ProviderBackend, ProviderError, ProviderRequest, ProviderResponse, StopReason,
    ToolCall, TranscriptSink,
};
use crate::tools;

/// Inserted between the kept head and tail of a truncated observation.
pub const ELISION_MARKER: &str = "\n[... truncated ...]\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { model_id: "scripted".into(), temperature: 1.0, max_output_tokens: 8192 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub name: String,
    pub prompt: String,
    pub tool_names: BTreeSet<String>,
    pub step_limit: u32,
    pub observation_cap: usize,
    pub model: ModelSettings,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgentSpecError {
    #[error("tool `{0}` is not in the engine registry")]
    UnknownTool(String),
    #[error("step_limit must be at least 1")]
    ZeroStepLimit,
    #[error("observation_cap must be at least 64")]
    ObservationCapTooSmall,
}

impl AgentSpec {
    pub fn new<I, S>(name: impl Into<String>, prompt: impl Into<String>, tools: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            name: name.into(),
            prompt: prompt.into(),
            tool_names: tools.into_iter().map(Into::into).collect(),
            step_limit: 40,
            observation_cap: 16384,
            model: ModelSettings::default(),
        }
    }

    pub fn with_limits(mut self, step_limit: u32, observation_cap: usize) -> Self {
        self.step_limit = step_limit;
        self.observation_cap = observation_cap;
        self
    }

    pub fn with_model(mut self, model: ModelSettings) -> Self {
        self.model = model;
        self
    }

    pub fn validate(&self) -> Result<(), AgentSpecError> {
        if let Some(bad) = self.tool_names.iter().find(|t| !tools::is_known_tool(t)) {
            return Err(AgentSpecError::UnknownTool(bad.clone()));
        }
        if self.step_limit == 0 {
            return Err(AgentSpecError::ZeroStepLimit);
        }
        if self.observation_cap < 64 {
            return Err(AgentSpecError::ObservationCapTooSmall);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tool_name: String,
    pub payload: String,
    pub truncated: bool,
    pub exit_status: Option<i32>,
}

impl Observation {
    fn message(&self) -> Message {
        Message::Observation {
            tool_name: self.tool_name.clone(),
            content: self.payload.clone(),
            truncated: self.truncated,
            exit_status: self.exit_status,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub model_output: ProviderResponse,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentStatus {
    Completed,
    StepLimit,
    BudgetExhausted,
    ToolFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentOutcome {
    pub final_text: String,
    pub status: AgentStatus,
    pub turns: Vec<Turn>,
    pub provider_calls: u32,
    pub diagnostic: Option<String>,
    /// Set when the loop ended because the provider failed.
    pub provider_error: Option<ProviderError>,
}

/// Raw tool result before truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct ToolOutput {
    pub payload: String,
    pub exit_status: Option<i32>,
}

impl ToolOutput {
    pub fn text(payload: impl Into<String>) -> Self {
        Self { payload: payload.into(), exit_status: None }
    }
}

/// Unrecoverable tool failure (unknown tool, sandbox breach). Ordinary tool
/// errors are returned as observation text instead.
#[derive(Clone, Debug, Error, PartialEq)]
#[error("tool `{tool}` failed: {reason}")]
pub struct ToolFailure {
    pub tool: String,
    pub reason: String,
}

/// Executes tool calls on behalf of one agent.
pub trait ToolHost: Sync {
    fn execute(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure>;

    /// Executes `calls` in order, stopping after the first failure. Hosts may
    /// override this to overlap independent calls, but results must come back
    /// in call order.
    fn execute_batch(&self, calls: &[&ToolCall]) -> Vec<Result<ToolOutput, ToolFailure>> {
        let mut out = Vec::with_capacity(calls.len());
        for call in calls {
            let result = self.execute(call);
            let failed = result.is_err();
            out.push(result);
            if failed {
                break;
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct AgentEnv<'a> {
    pub backend: &'a dyn ProviderBackend,
    pub sink: Option<&'a TranscriptSink>,
}

/// Truncates `raw` to at most `cap` characters, keeping a head and a tail.
pub fn truncate_observation(raw: &str, cap: usize) -> (String, bool) {
    let cap = cap.max(64);
    let len = raw.chars().count();
    if len <= cap {
        return (raw.to_string(), false);
    }
    let marker_len = ELISION_MARKER.chars().count();
    let head = cap.div_ceil(2);
    let tail = cap / 2 - marker_len;
    let mut out: String = raw.chars().take(head).collect();
    out.push_str(ELISION_MARKER);
    out.extend(raw.chars().skip(len - tail));
    (out, true)
}

/// Builds the provider request for the next step from the full history.
pub fn assemble_context(spec: &AgentSpec, user_input: &str, turns: &[Turn]) -> ProviderRequest {
    let mut messages = Vec::with_capacity(2 + turns.len() * 2);
    messages.push(Message::Prompt { content: spec.prompt.clone() });
    messages.push(Message::User { content: user_input.to_string() });
    for turn in turns {
        messages.push(Message::Model {
            content: turn.model_output.text.clone(),
            tool_calls: turn.model_output.tool_calls.clone(),
        });
        messages.extend(turn.observations.iter().map(Observation::message));
    }
    ProviderRequest {
        agent: spec.name.clone(),
        model_id: spec.model.model_id.clone(),
        temperature: spec.model.temperature,
        messages,
        tool_descriptors: spec.tool_names.iter().filter_map(|n| tools::descriptor(n)).collect(),
        max_output_tokens: spec.model.max_output_tokens,
    }
}

enum Slot {
    Run,
    Reject(String),
    Abort(String),
}

/// Runs the generate / execute / observe loop until the model answers without
/// tool calls, the step limit is hit, or the deadline passes.
pub fn run_agent(
    spec: &AgentSpec,
    user_input: &str,
    host: &dyn ToolHost,
    env: AgentEnv<'_>,
    deadline: Instant,
) -> AgentOutcome {
    let mut turns: Vec<Turn> = Vec::new();
    let finish = |turns: Vec<Turn>, status, diagnostic: Option<String>, provider_error| {
        let final_text = turns.last().map(|t| t.model_output.text.clone()).unwrap_or_default();
        AgentOutcome {
            final_text,
            status,
            provider_calls: turns.len() as u32,
            turns,
            diagnostic,
            provider_error,
        }
    };
    if let Err(e) = spec.validate() {
        return finish(turns, AgentStatus::ToolFailure, Some(e.to_string()), None);
    }

    loop {
        if Instant::now() >= deadline {
            return finish(turns, AgentStatus::BudgetExhausted, Some("deadline reached".into()), None);
        }
        let request = assemble_context(spec, user_input, &turns);
        let result = provider::complete(env.backend, &request);
        if let Some(sink) = env.sink {
            let recorded = result.clone().unwrap_or_else(|_| ProviderResponse::error());
            let _ = sink.record_exchange(&request, &recorded);
        }
        let response = match result {
            Ok(r) if r.stop_reason == StopReason::Error => {
                let diag = "provider returned an error stop".to_string();
                return finish(turns, AgentStatus::ToolFailure, Some(diag), None);
            }
            Ok(r) => r,
            Err(e) => {
                return finish(turns, AgentStatus::ToolFailure, Some(e.to_string()), Some(e));
            }
        };

        if response.tool_calls.is_empty() {
            turns.push(Turn { model_output: response, observations: Vec::new() });
            return finish(turns, AgentStatus::Completed, None, None);
        }

        let (observations, failure) = execute_turn(spec, host, &response.tool_calls);
        turns.push(Turn { model_output: response, observations });
        if let Some(f) = failure {
            return finish(turns, AgentStatus::ToolFailure, Some(f.to_string()), None);
        }
        if turns.len() as u32 >= spec.step_limit {
            return finish(turns, AgentStatus::StepLimit, None, None);
        }
    }
}

fn execute_turn(
    spec: &AgentSpec,
    host: &dyn ToolHost,
    calls: &[ToolCall],
) -> (Vec<Observation>, Option<ToolFailure>) {
    let slots: Vec<Slot> = calls
        .iter()
        .map(|call| {
            if !tools::is_known_tool(&call.name) {
                return Slot::Abort(format!("unknown tool `{}`", call.name));
            }
            if !spec.tool_names.contains(&call.name) {
                return Slot::Reject(format!("tool not available: {}", call.name));
            }
            match tools::descriptor(&call.name).map(|d| d.validate(&call.args)) {
                Some(Err(e)) => Slot::Reject(format!("invalid arguments for {}: {e}", call.name)),
                _ => Slot::Run,
            }
        })
        .collect();
    let abort_at = slots.iter().position(|s| matches!(s, Slot::Abort(_))).unwrap_or(slots.len());
    let runnable: Vec<&ToolCall> = calls[..abort_at]
        .iter()
        .zip(&slots)
        .filter(|(_, s)| matches!(s, Slot::Run))
        .map(|(c, _)| c)
        .collect();
    let mut results = host.execute_batch(&runnable).into_iter();

    let mut observations = Vec::with_capacity(calls.len());
    let mut failure: Option<ToolFailure> = None;
    for (i, (call, slot)) in calls.iter().zip(&slots).enumerate() {
        let (raw, exit_status) = if failure.is_some() || i > abort_at {
            ("skipped: an earlier tool call failed".to_string(), None)
        } else {
            match slot {
                Slot::Reject(text) => (text.clone(), None),
                Slot::Abort(reason) => {
                    failure = Some(ToolFailure { tool: call.name.clone(), reason: reason.clone() });
                    (format!("tool failure: {reason}"), None)
                }
                Slot::Run => match results.next() {
                    Some(Ok(out)) => (out.payload, out.exit_status),
                    Some(Err(f)) => {
                        let text = format!("tool failure: {}", f.reason);
                        failure = Some(f);
                        (text, None)
                    }
                    None => ("skipped: an earlier tool call failed".to_string(), None),
                },
            }
        };
        let (payload, truncated) = truncate_observation(&raw, spec.observation_cap);
        observations.push(Observation { tool_name: call.name.clone(), payload, truncated, exit_status });
    }
    (observations, failure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{parse_fixture, ScriptedBackend};
    use serde_json::json;
    use std::sync::Mutex;
    use std::time::Duration;

    struct EchoHost {
        executed: Mutex<Vec<String>>,
    }

    impl ToolHost for EchoHost {
        fn execute(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
            self.executed.lock().unwrap().push(call.name.clone());
            if call.str_arg("path") == Some("../escape") {
                return Err(ToolFailure { tool: call.name.clone(), reason: "path escape".into() });
            }
            Ok(ToolOutput::text(format!("{}:{}", call.name, call.str_arg("path").unwrap_or(""))))
        }
    }

    fn host() -> EchoHost {
        EchoHost { executed: Mutex::new(Vec::new()) }
    }

    fn later() -> Instant {
        Instant::now() + Duration::from_secs(60)
    }

    fn spec() -> AgentSpec {
        AgentSpec::new("t", "prompt", ["read", "write"]).with_limits(3, 1000)
    }

    fn backend(lines: &[&str]) -> ScriptedBackend {
        ScriptedBackend::new(parse_fixture(&lines.join("\n"), "t").unwrap())
    }

    #[test]
    fn single_shot_completes() {
        let b = backend(&[r#"{"match": {"index": 0}, "response": {"text": "answer"}}"#]);
        let out = run_agent(&spec(), "u", &host(), AgentEnv { backend: &b, sink: None }, later());
        assert_eq!(out.status, AgentStatus::Completed);
        assert_eq!(out.final_text, "answer");
        assert_eq!(out.provider_calls, 1);
    }

    #[test]
    fn step_limit_stops_loop() {
        let step = |i: usize| {
            format!(r#"{{"match": {{"index": {i}}}, "response": {{"tool_calls": [{{"name": "read", "args": {{"path": "x"}}}}]}}}}"#)
        };
        let lines: Vec<String> = (0..5).map(step).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let b = backend(&refs);
        let out = run_agent(&spec(), "u", &host(), AgentEnv { backend: &b, sink: None }, later());
        assert_eq!(out.status, AgentStatus::StepLimit);
        assert_eq!(out.provider_calls, 3);
        assert!(out.turns.iter().all(|t| t.observations.len() == 1));
    }

    #[test]
    fn forbidden_and_invalid_calls_become_observations() {
        let b = backend(&[
            r#"{"match": {"index": 0}, "response": {"tool_calls": [{"name": "execute", "args": {"command": "ls"}}, {"name": "read", "args": {}}, {"name": "read", "args": {"path": "a"}}]}}"#,
            r#"{"match": {"index": 1}, "response": {"text": "ok"}}"#,
        ]);
        let h = host();
        let out = run_agent(&spec(), "u", &h, AgentEnv { backend: &b, sink: None }, later());
        assert_eq!(out.status, AgentStatus::Completed);
        let obs = &out.turns[0].observations;
        assert_eq!(obs[0].payload, "tool not available: execute");
        assert!(obs[1].payload.starts_with("invalid arguments"));
        assert_eq!(obs[2].payload, "read:a");
        assert_eq!(*h.executed.lock().unwrap(), vec!["read".to_string()]);
    }

    #[test]
    fn host_failure_aborts_with_tool_failure() {
        let b = backend(&[
            r#"{"match": {"index": 0}, "response": {"tool_calls": [{"name": "read", "args": {"path": "../escape"}}, {"name": "read", "args": {"path": "b"}}]}}"#,
        ]);
        let h = host();
        let out = run_agent(&spec(), "u", &h, AgentEnv { backend: &b, sink: None }, later());
        assert_eq!(out.status, AgentStatus::ToolFailure);
        assert_eq!(out.turns[0].observations.len(), 2);
        assert!(out.turns[0].observations[1].payload.starts_with("skipped"));
        assert_eq!(h.executed.lock().unwrap().len(), 1);
    }

    #[test]
    fn script_mismatch_is_reported_as_tool_failure() {
        let digest = crate::digest::content_digest("not this");
        let line = format!(r#"{{"match": {{"digest": "{digest}"}}, "response": {{"text": "x"}}}}"#);
        let b = backend(&[&line]);
        let out = run_agent(&spec(), "u", &host(), AgentEnv { backend: &b, sink: None }, later());
        assert_eq!(out.status, AgentStatus::ToolFailure);
        assert!(matches!(out.provider_error, Some(ProviderError::ScriptMismatch { .. })));
        assert_eq!(out.provider_calls, 0);
    }

    #[test]
    fn past_deadline_makes_no_calls() {
        let b = backend(&[r#"{"match": {"index": 0}, "response": {"text": "x"}}"#]);
        let out = run_agent(&spec(), "u", &host(), AgentEnv { backend: &b, sink: None }, Instant::now());
        assert_eq!(out.status, AgentStatus::BudgetExhausted);
        assert_eq!(out.provider_calls, 0);
    }

    #[test]
    fn context_shapes() {
        let s = spec();
        let req = assemble_context(&s, "u", &[]);
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.messages[0], Message::Prompt { content: "prompt".into() });
        assert_eq!(req.tool_descriptors.len(), 2);

        let obs = |p: &str| Observation { tool_name: "read".into(), payload: p.into(), truncated: false, exit_status: None };
        let turn = |calls: Vec<ToolCall>, o: Vec<Observation>| Turn {
            model_output: ProviderResponse::calls("", calls),
            observations: o,
        };
        let c = |p: &str| ToolCall::new("read", json!({"path": p}));
        let turns = vec![turn(vec![c("a")], vec![obs("A")]), turn(vec![c("b")], vec![obs("B")])];
        let req = assemble_context(&s, "u", &turns);
        assert_eq!(req.messages.len(), 6);
        let contents: Vec<&str> = req.messages.iter().map(Message::content).collect();
        assert_eq!(contents, vec!["prompt", "u", "", "A", "", "B"]);

        let two = vec![turn(vec![c("x"), c("y")], vec![obs("X"), obs("Y")])];
        let req = assemble_context(&s, "u", &two);
        assert_eq!(req.messages[3].content(), "X");
        assert_eq!(req.messages[4].content(), "Y");
        assert!(req.validate().is_ok());
    }

    #[test]
    fn truncation_cases() {
        assert_eq!(truncate_observation("0123456789", 1000), ("0123456789".to_string(), false));
        let exact: String = "x".repeat(1000);
        assert_eq!(truncate_observation(&exact, 1000), (exact.clone(), false));
        let long: String = (0..10000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let (out, truncated) = truncate_observation(&long, 1000);
        assert!(truncated);
        assert_eq!(out.chars().count(), 1000);
        assert!(out.starts_with(&long[..500]));
        assert!(out.ends_with(&long[long.len() - (500 - ELISION_MARKER.len())..]));
    }

    proptest::proptest! {
        #[test]
        fn truncation_preserves_prefix_and_suffix(raw in "\\PC{0,3000}", cap in 64usize..2000) {
            let (out, truncated) = truncate_observation(&raw, cap);
            let n = raw.chars().count();
            proptest::prop_assert!(out.chars().count() <= cap);
            proptest::prop_assert_eq!(truncated, n > cap);
            if truncated {
                let head: String = raw.chars().take(cap.div_ceil(2)).collect();
                let tail_len = cap / 2 - ELISION_MARKER.chars().count();
                let tail: String = raw.chars().skip(n - tail_len).collect();
                proptest::prop_assert!(out.starts_with(&head));
                proptest::prop_assert!(out.ends_with(&tail));
            } else {
                proptest::prop_assert_eq!(out, raw);
            }
        }
    }
}
