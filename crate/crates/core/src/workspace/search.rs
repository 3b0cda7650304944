use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::content_digest;
use crate::provider::HttpTransport;

pub const DEFAULT_MAX_RESULTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub url: String,
    #[serde(default)]
    pub snippet: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("search unavailable: {0}")]
pub struct SearchUnavailable(pub String);

pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>, SearchUnavailable>;
}

/// Canned results keyed by query digest; unknown queries return nothing.
#[derive(Debug, Default)]
pub struct FixtureSearch {
    entries: HashMap<String, Vec<SearchResult>>,
    max_results: usize,
}

#[derive(Deserialize)]
struct FixtureLine {
    query_digest: String,
    results: Vec<SearchResult>,
}

impl FixtureSearch {
    pub fn new(max_results: usize) -> Self {
        Self { entries: HashMap::new(), max_results }
    }

    pub fn insert(&mut self, query: &str, results: Vec<SearchResult>) {
        self.entries.insert(content_digest(query), results);
    }

    pub fn parse(text: &str, max_results: usize) -> Result<Self, String> {
        let mut out = Self::new(max_results);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine =
                serde_json::from_str(line).map_err(|e| format!("search fixture line {}: {e}", i + 1))?;
            out.entries.insert(parsed.query_digest.to_ascii_lowercase(), parsed.results);
        }
        Ok(out)
    }

    pub fn load(path: &Path, max_results: usize) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text, max_results)
    }

    pub fn to_jsonl(&self) -> String {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| serde_json::json!({"query_digest": k, "results": self.entries[k]}).to_string() + "\n")
            .collect()
    }
}

impl SearchBackend for FixtureSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>, SearchUnavailable> {
        Ok(self
            .entries
            .get(&content_digest(query))
            .map(|r| r.iter().take(self.max_results).cloned().collect())
            .unwrap_or_default())
    }
}

/// GETs `<endpoint>?q=<query>` and expects `{"results": [{title, url, snippet}]}`.
pub struct LiveSearch {
    endpoint: String,
    credential: Option<String>,
    transport: Arc<dyn HttpTransport>,
    max_results: usize,
}

impl LiveSearch {
    pub fn new(
        endpoint: impl Into<String>,
        credential: Option<String>,
        transport: Arc<dyn HttpTransport>,
        max_results: usize,
    ) -> Self {
        Self { endpoint: endpoint.into(), credential, transport, max_results }
    }
}

fn encode_query(q: &str) -> String {
    q.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            b' ' => "+".to_string(),
            other => format!("%{other:02X}"),
        })
        .collect()
}

impl SearchBackend for LiveSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>, SearchUnavailable> {
        let url = format!("{}?q={}", self.endpoint, encode_query(query));
        let payload = self
            .transport
            .get_json(&url, self.credential.as_deref())
            .map_err(|e| SearchUnavailable(format!("{e:?}")))?;
        let results: Vec<SearchResult> = payload
            .get("results")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| SearchUnavailable(format!("bad payload: {e}")))?
            .unwrap_or_default();
        Ok(results.into_iter().take(self.max_results).collect())
    }
}

/// Backend for runs without search configured.
pub struct NoSearch;

impl SearchBackend for NoSearch {
    fn search(&self, _query: &str) -> Result<Vec<SearchResult>, SearchUnavailable> {
        Err(SearchUnavailable("no search backend configured".into()))
    }
}
