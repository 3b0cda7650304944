use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    Message, ProviderBackend, ProviderError, ProviderMode, ProviderRequest, ProviderResponse,
    StopReason, ToolCall, Usage,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportError {
    /// Network-level or retryable remote failure (timeouts, 429, 5xx).
    Transient(String),
    /// Non-retryable remote rejection.
    Fatal(String),
}

/// Minimal HTTP surface used by live backends; swapped for fault-injecting
/// doubles in tests.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, TransportError>;

    fn get_json(&self, url: &str, bearer: Option<&str>) -> Result<Value, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        Self { agent: ureq::Agent::new_with_config(config) }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(600))
    }
}

fn classify(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            TransportError::Transient(format!("HTTP {code}"))
        }
        ureq::Error::StatusCode(code) => TransportError::Fatal(format!("HTTP {code}")),
        ureq::Error::BadUri(u) => TransportError::Fatal(format!("bad uri {u}")),
        other => TransportError::Transient(other.to_string()),
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.agent.post(url);
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| TransportError::Fatal(format!("unparsable body: {e}")))
    }

    fn get_json(&self, url: &str, bearer: Option<&str>) -> Result<Value, TransportError> {
        let mut req = self.agent.get(url);
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.call().map_err(classify)?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| TransportError::Fatal(format!("unparsable body: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    /// Total transport attempts, including the first.
    pub attempts: u32,
    pub base: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base: Duration::from_secs(1), factor: 2.0 }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first.
        if attempt <= 1 {
            return Duration::ZERO;
        }
        self.base.mul_f64(self.factor.powi(attempt as i32 - 2))
    }
}

/// Chat-completion backend speaking the common `/chat/completions` wire
/// format with function tools.
pub struct LiveBackend {
    endpoint: String,
    credential: Option<String>,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
}

impl LiveBackend {
    pub fn new(
        endpoint: impl Into<String>,
        credential: Option<String>,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
    ) -> Self {
        Self { endpoint: endpoint.into(), credential, transport, retry }
    }

    pub fn wire_body(request: &ProviderRequest) -> Value {
        let mut messages = Vec::new();
        let mut pending_ids: std::collections::VecDeque<String> = Default::default();
        for (m, msg) in request.messages.iter().enumerate() {
            match msg {
                Message::Prompt { content } => messages.push(json!({"role": "system", "content": content})),
                Message::User { content } => messages.push(json!({"role": "user", "content": content})),
                Message::Model { content, tool_calls } => {
                    let calls: Vec<Value> = tool_calls
                        .iter()
                        .enumerate()
                        .map(|(j, c)| {
                            let id = format!("call_{m}_{j}");
                            pending_ids.push_back(id.clone());
                            json!({
                                "id": id,
                                "type": "function",
                                "function": {"name": c.name, "arguments": Value::Object(c.args.clone()).to_string()},
                            })
                        })
                        .collect();
                    let mut entry = json!({"role": "assistant", "content": content});
                    if !calls.is_empty() {
                        entry["tool_calls"] = Value::Array(calls);
                    }
                    messages.push(entry);
                }
                Message::Observation { content, .. } => {
                    let id = pending_ids.pop_front().unwrap_or_default();
                    messages.push(json!({"role": "tool", "tool_call_id": id, "content": content}));
                }
            }
        }
        let tools: Vec<Value> = request
            .tool_descriptors
            .iter()
            .map(|d| {
                json!({"type": "function", "function": {
                    "name": d.name, "description": d.description, "parameters": d.json_schema(),
                }})
            })
            .collect();
        let mut body = json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": messages,
        });
        if !tools.is_empty() {
            body["tools"] = Value::Array(tools);
        }
        body
    }

    pub fn parse_wire(payload: &Value) -> Result<ProviderResponse, ProviderError> {
        let bad = |what: &str| ProviderError::MalformedResponse(what.to_string());
        let choice = payload
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| bad("missing choices[0]"))?;
        let message = choice.get("message").ok_or_else(|| bad("missing message"))?;
        let text = match message.get("content") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(bad("content is not a string")),
        };
        let mut tool_calls = Vec::new();
        if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
            for call in calls {
                let func = call.get("function").ok_or_else(|| bad("tool call without function"))?;
                let name = func
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad("tool call without name"))?;
                let args = match func.get("arguments") {
                    Some(Value::String(s)) if s.trim().is_empty() => json!({}),
                    Some(Value::String(s)) => serde_json::from_str(s)
                        .map_err(|e| bad(&format!("tool arguments not JSON: {e}")))?,
                    Some(v @ Value::Object(_)) => v.clone(),
                    _ => json!({}),
                };
                if !args.is_object() {
                    return Err(bad("tool arguments must be an object"));
                }
                tool_calls.push(ToolCall::new(name, args));
            }
        }
        let stop_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("length") => StopReason::Length,
            _ => StopReason::Natural,
        };
        let usage = payload.get("usage").map(|u| Usage {
            input: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            output: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        });
        Ok(ProviderResponse { text, tool_calls, stop_reason, usage: usage.unwrap_or_default() })
    }
}

impl ProviderBackend for LiveBackend {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let body = Self::wire_body(request);
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            std::thread::sleep(self.retry.delay_before(attempt));
            match self.transport.post_json(&url, self.credential.as_deref(), &body) {
                Ok(payload) => return Self::parse_wire(&payload),
                Err(TransportError::Fatal(detail)) => {
                    return Err(ProviderError::TransportFailure { attempts: attempt, detail })
                }
                Err(TransportError::Transient(detail)) => last = detail,
            }
        }
        Err(ProviderError::TransportFailure { attempts: self.retry.attempts.max(1), detail: last })
    }

    fn mode(&self) -> ProviderMode {
        ProviderMode::Live
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        attempts: AtomicU32,
    }

    impl HttpTransport for Flaky {
        fn post_json(&self, _: &str, _: Option<&str>, _: &Value) -> Result<Value, TransportError> {
            let n = self.attempts.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.failures {
                return Err(TransportError::Transient("connection reset".into()));
            }
            Ok(json!({
                "choices": [{"message": {"content": "fine", "tool_calls": [
                    {"id": "x", "type": "function", "function": {"name": "read", "arguments": "{\"path\":\"plan.md\"}"}}
                ]}, "finish_reason": "tool_calls"}],
                "usage": {"prompt_tokens": 11, "completion_tokens": 3}
            }))
        }

        fn get_json(&self, _: &str, _: Option<&str>) -> Result<Value, TransportError> {
            unreachable!()
        }
    }

    fn request() -> ProviderRequest {
        ProviderRequest {
            agent: "a".into(),
            model_id: "m".into(),
            temperature: 1.0,
            messages: vec![
                Message::Prompt { content: "p".into() },
                Message::User { content: "u".into() },
            ],
            tool_descriptors: vec![],
            max_output_tokens: 8,
        }
    }

    fn quick_retry() -> RetryPolicy {
        RetryPolicy { attempts: 3, base: Duration::ZERO, factor: 2.0 }
    }

    #[test]
    fn two_transient_failures_then_success() {
        let transport = Arc::new(Flaky { failures: 2, attempts: AtomicU32::new(0) });
        let backend = LiveBackend::new("http://x", None, transport.clone(), quick_retry());
        let resp = backend.complete(&request()).unwrap();
        assert_eq!(transport.attempts.load(Ordering::SeqCst), 3);
        assert_eq!(resp.text, "fine");
        assert_eq!(resp.tool_calls[0].str_arg("path"), Some("plan.md"));
        assert_eq!(resp.usage, Usage { input: 11, output: 3 });
    }

    #[test]
    fn persistent_outage_surfaces_transport_failure() {
        let transport = Arc::new(Flaky { failures: 10, attempts: AtomicU32::new(0) });
        let backend = LiveBackend::new("http://x", None, transport.clone(), quick_retry());
        assert!(matches!(
            backend.complete(&request()),
            Err(ProviderError::TransportFailure { attempts: 3, .. })
        ));
        assert_eq!(transport.attempts.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(1), Duration::ZERO);
        assert_eq!(p.delay_before(2), Duration::from_secs(1));
        assert_eq!(p.delay_before(3), Duration::from_secs(2));
    }

    #[test]
    fn malformed_payloads() {
        assert!(matches!(LiveBackend::parse_wire(&json!({})), Err(ProviderError::MalformedResponse(_))));
        let bad_args = json!({"choices": [{"message": {"tool_calls": [{"function": {"name": "read", "arguments": "{nope"}}]}}]});
        assert!(LiveBackend::parse_wire(&bad_args).is_err());
    }

    #[test]
    fn wire_body_pairs_tool_ids() {
        let mut req = request();
        req.messages.push(Message::Model {
            content: String::new(),
            tool_calls: vec![ToolCall::new("read", json!({"path": "a"})), ToolCall::new("read", json!({"path": "b"}))],
        });
        for c in ["A", "B"] {
            req.messages.push(Message::Observation {
                tool_name: "read".into(),
                content: c.into(),
                truncated: false,
                exit_status: None,
            });
        }
        let body = LiveBackend::wire_body(&req);
        let msgs = body["messages"].as_array().unwrap();
        assert_eq!(msgs[2]["tool_calls"][1]["id"], "call_2_1");
        assert_eq!(msgs[3]["tool_call_id"], "call_2_0");
        assert_eq!(msgs[4]["tool_call_id"], "call_2_1");
    }
}
