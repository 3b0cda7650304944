//! State shared by every agent of one run.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::agent::{AgentEnv, ModelSettings};
use crate::config::RunConfig;
use crate::digest::content_digest;
use crate::provider::{ProviderBackend, ProviderError, TranscriptSink};
use crate::workspace::{ExecSettings, NoSearch, SearchBackend, Workspace};

/// Agent prompts. The built-in set ships with the engine; a prompts
/// directory overrides individual files.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompts {
    pub manager: String,
    pub designer: String,
    pub coder: String,
    pub tuner: String,
    pub setup: String,
    pub aggregator: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            manager: include_str!("../prompts/manager.md").into(),
            designer: include_str!("../prompts/designer.md").into(),
            coder: include_str!("../prompts/coder.md").into(),
            tuner: include_str!("../prompts/tuner.md").into(),
            setup: include_str!("../prompts/setup.md").into(),
            aggregator: include_str!("../prompts/aggregator.md").into(),
        }
    }
}

impl Prompts {
    pub fn load(dir: Option<&Path>) -> std::io::Result<Self> {
        let mut p = Self::default();
        let Some(dir) = dir else { return Ok(p) };
        for (name, slot) in p.slots_mut() {
            let path = dir.join(format!("{name}.md"));
            if path.is_file() {
                *slot = fs::read_to_string(path)?;
            }
        }
        Ok(p)
    }

    fn slots_mut(&mut self) -> [(&'static str, &mut String); 6] {
        [
            ("manager", &mut self.manager),
            ("designer", &mut self.designer),
            ("coder", &mut self.coder),
            ("tuner", &mut self.tuner),
            ("setup", &mut self.setup),
            ("aggregator", &mut self.aggregator),
        ]
    }

    /// Name → content digest, recorded at run start.
    pub fn digests(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (name, text) in [
            ("manager", &self.manager),
            ("designer", &self.designer),
            ("coder", &self.coder),
            ("tuner", &self.tuner),
            ("setup", &self.setup),
            ("aggregator", &self.aggregator),
        ] {
            map.insert(name.into(), Value::String(content_digest(text)));
        }
        Value::Object(map)
    }
}

/// Wall-clock budget of a run. Sub-agent work must end by
/// `work_deadline`; the remainder up to `deadline` belongs to the aggregator.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub started_at: Instant,
    pub total: Duration,
    pub grace: Duration,
    pub reserve: Duration,
}

impl Budget {
    pub fn start(total: Duration, grace: Duration, reserve: Duration) -> Self {
        Self { started_at: Instant::now(), total, grace, reserve }
    }

    pub fn from_config(config: &RunConfig) -> Self {
        let b = &config.budget;
        Self::start(
            Duration::from_secs_f64(b.total_seconds),
            Duration::from_secs_f64(b.grace_seconds),
            Duration::from_secs_f64(b.aggregator_reserve_seconds),
        )
    }

    pub fn deadline(&self) -> Instant {
        self.started_at + self.total
    }

    pub fn work_deadline(&self) -> Instant {
        self.started_at + self.total.saturating_sub(self.reserve)
    }

    pub fn elapsed(&self) -> Duration {
        self.started_at.elapsed()
    }

    pub fn remaining(&self) -> Duration {
        self.deadline().saturating_duration_since(Instant::now())
    }
}

pub struct RunContext {
    pub config: RunConfig,
    pub workspace: Workspace,
    pub backend: Arc<dyn ProviderBackend>,
    pub sink: Arc<TranscriptSink>,
    pub search: Arc<dyn SearchBackend>,
    pub prompts: Prompts,
    pub task: String,
    pub budget: Budget,
    /// Set by setup; prepended to every command.
    pub activation_prefix: String,
    faults: Mutex<Vec<ProviderError>>,
}

impl RunContext {
    pub fn new(
        config: RunConfig,
        workspace: Workspace,
        backend: Arc<dyn ProviderBackend>,
        sink: Arc<TranscriptSink>,
        task: impl Into<String>,
        budget: Budget,
    ) -> Self {
        Self {
            config,
            workspace,
            backend,
            sink,
            search: Arc::new(NoSearch),
            prompts: Prompts::default(),
            task: task.into(),
            budget,
            activation_prefix: String::new(),
            faults: Mutex::new(Vec::new()),
        }
    }

    pub fn env(&self) -> AgentEnv<'_> {
        AgentEnv { backend: self.backend.as_ref(), sink: Some(self.sink.as_ref()) }
    }

    pub fn model(&self) -> ModelSettings {
        let p = &self.config.provider;
        ModelSettings {
            model_id: p.model_id.clone(),
            temperature: p.temperature,
            max_output_tokens: p.max_output_tokens,
        }
    }

    pub fn exec_settings(&self) -> ExecSettings {
        ExecSettings {
            grace: self.budget.grace,
            activation_prefix: self.activation_prefix.clone(),
            ..ExecSettings::default()
        }
    }

    pub fn event(&self, kind: &str, body: Value) {
        let _ = self.sink.record_event(kind, body);
    }

    pub fn record_fault(&self, error: ProviderError) {
        self.faults.lock().unwrap().push(error);
    }

    pub fn faults(&self) -> Vec<ProviderError> {
        self.faults.lock().unwrap().clone()
    }

    /// True once a scripted fixture has desynchronized from the run.
    pub fn script_broken(&self) -> bool {
        self.faults.lock().unwrap().iter().any(|e| matches!(e, ProviderError::ScriptMismatch { .. }))
    }
}

/// Truncates to at most `max` characters.
pub(crate) fn clip(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        return text.to_string();
    }
    let mut out: String = text.chars().take(max.saturating_sub(3)).collect();
    out.push_str("...");
    out
}
