use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use super::{ProviderBackend, ProviderError, ProviderMode, ProviderRequest, ProviderResponse};
use crate::digest::content_digest;
use crate::tools;

/// Stream used by agents that have no dedicated stream in a pack.
pub const DEFAULT_STREAM: &str = "*";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Matcher {
    /// Matches any request; the index is the step's position in its stream.
    ByIndex(usize),
    /// Matches when the digest of the request's final message content equals
    /// this hex string.
    ByDigest(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScriptStep {
    pub matcher: Matcher,
    pub response: ProviderResponse,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScriptFixture {
    pub steps: Vec<ScriptStep>,
    pub cursor: usize,
}

impl ScriptFixture {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self { steps, cursor: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.steps.len() - self.cursor
    }

    /// Serves the next step if `request` matches it. The cursor only moves on
    /// success.
    pub fn next_response(
        &mut self,
        request: &ProviderRequest,
    ) -> Result<ProviderResponse, ProviderError> {
        let mismatch = |step: usize, detail: String| ProviderError::ScriptMismatch {
            agent: request.agent.clone(),
            step,
            detail,
        };
        let Some(step) = self.steps.get(self.cursor) else {
            return Err(mismatch(self.cursor, "script exhausted".into()));
        };
        if let Matcher::ByDigest(expected) = &step.matcher {
            let actual = content_digest(request.final_content());
            if &actual != expected {
                return Err(mismatch(
                    self.cursor,
                    format!("final message digest {actual} != expected {expected}"),
                ));
            }
        }
        self.cursor += 1;
        Ok(step.response.clone())
    }
}

/// Fixture streams keyed by agent label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixturePack {
    pub streams: BTreeMap<String, ScriptFixture>,
}

impl FixturePack {
    pub fn single(fixture: ScriptFixture) -> Self {
        let mut streams = BTreeMap::new();
        streams.insert(DEFAULT_STREAM.to_string(), fixture);
        Self { streams }
    }

    /// Renders the pack in the single-file fixture format, one step per
    /// line with an `agent` key.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (agent, fixture) in &self.streams {
            for step in &fixture.steps {
                let matcher = match &step.matcher {
                    Matcher::ByIndex(k) => serde_json::json!({ "index": k }),
                    Matcher::ByDigest(d) => serde_json::json!({ "digest": d }),
                };
                let mut line = serde_json::json!({
                    "match": matcher,
                    "response": step.response,
                });
                if agent != DEFAULT_STREAM {
                    line["agent"] = Value::String(agent.clone());
                }
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture parse error at {locus}: {detail}")]
    ParseError { locus: String, detail: String },
    #[error("fixture at {locus} references unknown tool `{name}`")]
    UnknownToolName { locus: String, name: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    #[serde(rename = "match")]
    matcher: RawMatcher,
    response: ProviderResponse,
    #[serde(default)]
    agent: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatcher {
    index: Option<usize>,
    digest: Option<String>,
}

/// Parses fixture text into per-agent streams. `origin` names the source in
/// error loci.
pub fn parse_fixture(text: &str, origin: &str) -> Result<FixturePack, FixtureError> {
    let mut pack = FixturePack::default();
    let mut any = false;
    for (lineno, line) in text.lines().enumerate() {
        let locus = format!("{origin}:{}", lineno + 1);
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let raw: RawStep = serde_json::from_str(line).map_err(|e| FixtureError::ParseError {
            locus: locus.clone(),
            detail: e.to_string(),
        })?;
        for call in &raw.response.tool_calls {
            if !tools::is_known_tool(&call.name) {
                return Err(FixtureError::UnknownToolName {
                    locus,
                    name: call.name.clone(),
                });
            }
        }
        let stream = pack
            .streams
            .entry(raw.agent.unwrap_or_else(|| DEFAULT_STREAM.to_string()))
            .or_default();
        let position = stream.steps.len();
        let matcher = match (raw.matcher.index, raw.matcher.digest) {
            (Some(k), None) if k == position => Matcher::ByIndex(k),
            (Some(k), None) => {
                return Err(FixtureError::ParseError {
                    locus,
                    detail: format!("index {k} does not match stream position {position}"),
                })
            }
            (None, Some(d)) if d.len() == 64 && d.bytes().all(|b| b.is_ascii_hexdigit()) => {
                Matcher::ByDigest(d.to_ascii_lowercase())
            }
            _ => {
                return Err(FixtureError::ParseError {
                    locus,
                    detail: "match must be {\"index\": k} or {\"digest\": \"<64 hex>\"}".into(),
                })
            }
        };
        stream.steps.push(ScriptStep { matcher, response: raw.response });
    }
    if !any {
        return Err(FixtureError::ParseError {
            locus: origin.to_string(),
            detail: "fixture contains no steps".into(),
        });
    }
    Ok(pack)
}

/// Loads one fixture stream from a line-delimited file. Any `agent` keys are
/// ignored and steps are served in file order.
pub fn load_fixture(path: impl AsRef<Path>) -> Result<ScriptFixture, FixtureError> {
    let path = path.as_ref();
    let text = read(path)?;
    let origin = path.display().to_string();
    let stripped: String = text
        .lines()
        .map(|line| match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(mut map)) => {
                map.remove("agent");
                Value::Object(map).to_string()
            }
            _ => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let mut pack = parse_fixture(&stripped, &origin)?;
    Ok(pack.streams.remove(DEFAULT_STREAM).unwrap_or_default())
}

/// Loads a fixture pack: either a directory of `<agent>.jsonl` files or one
/// file whose lines carry an optional `agent` key.
pub fn load_fixture_pack(path: impl AsRef<Path>) -> Result<FixturePack, FixtureError> {
    let path = path.as_ref();
    if !path.is_dir() {
        let text = read(path)?;
        return parse_fixture(&text, &path.display().to_string());
    }
    let entries = fs::read_dir(path).map_err(|source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut files: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut pack = FixturePack::default();
    for file in files {
        let agent = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let fixture = load_fixture(&file)?;
        pack.streams.insert(agent, fixture);
    }
    if pack.streams.is_empty() {
        return Err(FixtureError::ParseError {
            locus: path.display().to_string(),
            detail: "fixture directory contains no .jsonl streams".into(),
        });
    }
    Ok(pack)
}

fn read(path: &Path) -> Result<String, FixtureError> {
    fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Deterministic replay backend. Temperature is ignored.
#[derive(Debug)]
pub struct ScriptedBackend {
    pack: Mutex<FixturePack>,
}

impl ScriptedBackend {
    pub fn new(pack: FixturePack) -> Self {
        Self { pack: Mutex::new(pack) }
    }

    pub fn from_fixture(fixture: ScriptFixture) -> Self {
        Self::new(FixturePack::single(fixture))
    }

    pub fn cursor(&self, agent: &str) -> Option<usize> {
        let pack = self.pack.lock().unwrap();
        pack.streams.get(agent).map(|f| f.cursor)
    }

    /// Steps not yet served, per stream.
    pub fn unconsumed(&self) -> BTreeMap<String, usize> {
        let pack = self.pack.lock().unwrap();
        pack.streams
            .iter()
            .filter(|(_, f)| f.remaining() > 0)
            .map(|(k, f)| (k.clone(), f.remaining()))
            .collect()
    }
}

impl ProviderBackend for ScriptedBackend {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let mut pack = self.pack.lock().unwrap();
        let key = if pack.streams.contains_key(&request.agent) {
            request.agent.as_str()
        } else {
            DEFAULT_STREAM
        };
        match pack.streams.get_mut(key) {
            Some(stream) => stream.next_response(request),
            None => Err(ProviderError::ScriptMismatch {
                agent: request.agent.clone(),
                step: 0,
                detail: "no fixture stream for this agent".into(),
            }),
        }
    }

    fn mode(&self) -> ProviderMode {
        ProviderMode::Scripted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::Message;

    fn request(agent: &str, last: &str) -> ProviderRequest {
        ProviderRequest {
            agent: agent.into(),
            model_id: "m".into(),
            temperature: 1.0,
            messages: vec![
                Message::Prompt { content: "p".into() },
                Message::User { content: last.into() },
            ],
            tool_descriptors: vec![],
            max_output_tokens: 64,
        }
    }

    #[test]
    fn by_index_serves_any_request() {
        let pack = parse_fixture(r#"{"match": {"index": 0}, "response": {"text": "done"}}"#, "t")
            .unwrap();
        let backend = ScriptedBackend::new(pack);
        let resp = backend.complete(&request("x", "anything")).unwrap();
        assert_eq!(resp.text, "done");
        assert!(resp.tool_calls.is_empty());
        assert_eq!(backend.cursor(DEFAULT_STREAM), Some(1));
    }

    #[test]
    fn digest_mismatch_keeps_cursor() {
        let digest = content_digest("expected");
        let text = format!(r#"{{"match": {{"digest": "{digest}"}}, "response": {{"text": "ok"}}}}"#);
        let backend = ScriptedBackend::new(parse_fixture(&text, "t").unwrap());
        let err = backend.complete(&request("x", "other")).unwrap_err();
        assert!(matches!(err, ProviderError::ScriptMismatch { step: 0, .. }));
        assert_eq!(backend.cursor(DEFAULT_STREAM), Some(0));
        assert_eq!(backend.complete(&request("x", "expected")).unwrap().text, "ok");
        assert_eq!(backend.cursor(DEFAULT_STREAM), Some(1));
    }

    #[test]
    fn exhausted_script_is_mismatch() {
        let pack = parse_fixture(r#"{"match": {"index": 0}, "response": {"text": "a"}}"#, "t")
            .unwrap();
        let backend = ScriptedBackend::new(pack);
        backend.complete(&request("x", "u")).unwrap();
        assert!(matches!(
            backend.complete(&request("x", "u")),
            Err(ProviderError::ScriptMismatch { step: 1, .. })
        ));
    }

    #[test]
    fn streams_are_selected_by_agent() {
        let text = concat!(
            r#"{"agent": "designer_1", "match": {"index": 0}, "response": {"text": "d1"}}"#,
            "\n",
            r#"{"agent": "designer_2", "match": {"index": 0}, "response": {"text": "d2"}}"#,
            "\n",
            r#"{"match": {"index": 0}, "response": {"text": "fallback"}}"#,
        );
        let backend = ScriptedBackend::new(parse_fixture(text, "t").unwrap());
        assert_eq!(backend.complete(&request("designer_2", "u")).unwrap().text, "d2");
        assert_eq!(backend.complete(&request("designer_1", "u")).unwrap().text, "d1");
        assert_eq!(backend.complete(&request("coder_1", "u")).unwrap().text, "fallback");
    }

    #[test]
    fn load_errors() {
        assert!(matches!(parse_fixture("", "t"), Err(FixtureError::ParseError { .. })));
        assert!(matches!(
            parse_fixture(r#"{"match": {"index": 0}, "response": {"tool_calls": [{"name": "frobnicate"}]}}"#, "t"),
            Err(FixtureError::UnknownToolName { .. })
        ));
        let err = parse_fixture("{\"match\": {\"index\": 0}, \"response\": {}}\nnot json", "f.jsonl")
            .unwrap_err();
        match err {
            FixtureError::ParseError { locus, .. } => assert_eq!(locus, "f.jsonl:2"),
            other => panic!("{other:?}"),
        }
        assert!(parse_fixture(r#"{"match": {"index": 3}, "response": {}}"#, "t").is_err());
        assert!(parse_fixture(r#"{"match": {"index": 0}, "response": {"stop": "weird"}}"#, "t").is_err());
    }

    #[test]
    fn three_step_file_loads_with_cursor_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let lines: Vec<String> = (0..3)
            .map(|i| format!(r#"{{"match": {{"index": {i}}}, "response": {{"text": "s{i}", "stop": "natural"}}}}"#))
            .collect();
        fs::write(&path, lines.join("\n")).unwrap();
        let fixture = load_fixture(&path).unwrap();
        assert_eq!(fixture.steps.len(), 3);
        assert_eq!(fixture.cursor, 0);
    }

    #[test]
    fn pack_round_trips_through_jsonl() {
        let text = concat!(
            r#"{"agent": "coder_1", "match": {"index": 0}, "response": {"text": "c", "tool_calls": [{"name": "read", "args": {"path": "plan.md"}}]}}"#,
            "\n",
            r#"{"agent": "manager", "match": {"index": 0}, "response": {"text": "m"}}"#,
        );
        let pack = parse_fixture(text, "t").unwrap();
        let again = parse_fixture(&pack.to_jsonl(), "t2").unwrap();
        assert_eq!(pack, again);
    }
}
