//! The LLM boundary: request/response types, the backend trait, the live
//! HTTP backend, the scripted replay backend and transcript recording.

mod live;
mod scripted;
mod transcript;

pub use live::{HttpTransport, LiveBackend, RetryPolicy, TransportError, UreqTransport};
pub use scripted::{
    load_fixture, load_fixture_pack, parse_fixture, FixturePack, Matcher, ScriptFixture,
    ScriptStep, ScriptedBackend, DEFAULT_STREAM,
};
pub use transcript::{read_transcript, SinkClosed, TranscriptRecord, TranscriptSink};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub type Arguments = Map<String, Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub args: Arguments,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, args: Value) -> Self {
        let args = match args {
            Value::Object(map) => map,
            _ => Map::new(),
        };
        Self { name: name.into(), args }
    }

    pub fn str_arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).and_then(Value::as_str)
    }

    pub fn f64_arg(&self, key: &str) -> Option<f64> {
        self.args.get(key).and_then(Value::as_f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Number,
    Integer,
    Array,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
}

impl ToolDescriptor {
    /// Checks `args` against the parameter list. Unknown keys are rejected so
    /// that typos surface to the model instead of being silently ignored.
    pub fn validate(&self, args: &Arguments) -> Result<(), String> {
        for param in &self.params {
            match args.get(&param.name) {
                None | Some(Value::Null) if param.required => {
                    return Err(format!("missing required argument `{}`", param.name));
                }
                None | Some(Value::Null) => {}
                Some(value) => {
                    let ok = match param.kind {
                        ParamKind::String => value.is_string(),
                        ParamKind::Number => value.is_number(),
                        ParamKind::Integer => value.is_i64() || value.is_u64(),
                        ParamKind::Array => value.is_array(),
                    };
                    if !ok {
                        return Err(format!(
                            "argument `{}` must be of type {:?}",
                            param.name, param.kind
                        ));
                    }
                }
            }
        }
        if let Some(extra) = args.keys().find(|k| !self.params.iter().any(|p| &p.name == *k)) {
            return Err(format!("unknown argument `{extra}`"));
        }
        Ok(())
    }

    /// JSON-schema rendering used by the live chat-completion backend.
    pub fn json_schema(&self) -> Value {
        let mut props = Map::new();
        let mut required = Vec::new();
        for p in &self.params {
            let ty = match p.kind {
                ParamKind::String => "string",
                ParamKind::Number => "number",
                ParamKind::Integer => "integer",
                ParamKind::Array => "array",
            };
            props.insert(
                p.name.clone(),
                serde_json::json!({"type": ty, "description": p.description}),
            );
            if p.required {
                required.push(Value::String(p.name.clone()));
            }
        }
        serde_json::json!({"type": "object", "properties": props, "required": required})
    }
}

/// One entry of an agent's context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Message {
    Prompt {
        content: String,
    },
    User {
        content: String,
    },
    Model {
        content: String,
        #[serde(default)]
        tool_calls: Vec<ToolCall>,
    },
    Observation {
        tool_name: String,
        content: String,
        #[serde(default)]
        truncated: bool,
        #[serde(default)]
        exit_status: Option<i32>,
    },
}

impl Message {
    pub fn content(&self) -> &str {
        match self {
            Message::Prompt { content }
            | Message::User { content }
            | Message::Model { content, .. }
            | Message::Observation { content, .. } => content,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    #[serde(alias = "natural_stop")]
    Natural,
    #[serde(alias = "length_limit")]
    Length,
    Error,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub input: u64,
    #[serde(default)]
    pub output: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    /// Stream label of the calling agent, e.g. `coder_3`. Scripted backends
    /// select the fixture stream by this label.
    pub agent: String,
    pub model_id: String,
    pub temperature: f64,
    pub messages: Vec<Message>,
    pub tool_descriptors: Vec<ToolDescriptor>,
    pub max_output_tokens: u32,
}

impl ProviderRequest {
    pub fn final_content(&self) -> &str {
        self.messages.last().map(Message::content).unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        let mut it = self.messages.iter();
        match (it.next(), it.next()) {
            (Some(Message::Prompt { .. }), Some(Message::User { .. })) => {}
            _ => return Err("context must start with the agent prompt and user input".into()),
        }
        let mut pending = 0usize;
        for msg in it {
            match msg {
                Message::Model { tool_calls, .. } if pending == 0 => pending = tool_calls.len(),
                Message::Observation { .. } if pending > 0 => pending -= 1,
                _ => return Err("model outputs and observations out of order".into()),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    #[serde(rename = "stop", default = "natural")]
    pub stop_reason: StopReason,
    #[serde(default)]
    pub usage: Usage,
}

fn natural() -> StopReason {
    StopReason::Natural
}

impl ProviderResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tool_calls: Vec::new(),
            stop_reason: StopReason::Natural,
            usage: Usage::default(),
        }
    }

    pub fn calls(text: impl Into<String>, tool_calls: Vec<ToolCall>) -> Self {
        Self { tool_calls, ..Self::text(text) }
    }

    pub fn error() -> Self {
        Self {
            text: String::new(),
            tool_calls: Vec::new(),
            stop_reason: StopReason::Error,
            usage: Usage::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    TransportFailure { attempts: u32, detail: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("script mismatch for agent `{agent}` at step {step}: {detail}")]
    ScriptMismatch {
        agent: String,
        step: usize,
        detail: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Live,
    Scripted,
}

pub trait ProviderBackend: Send + Sync {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError>;

    fn mode(&self) -> ProviderMode;
}

/// `complete` with request validation, the form agents use.
pub fn complete(
    backend: &dyn ProviderBackend,
    request: &ProviderRequest,
) -> Result<ProviderResponse, ProviderError> {
    request.validate().map_err(ProviderError::InvalidRequest)?;
    backend.complete(request)
}
