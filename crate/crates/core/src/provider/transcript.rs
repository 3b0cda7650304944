use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{ProviderRequest, ProviderResponse};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("transcript sink is closed")]
pub struct SinkClosed;

/// One line of the run transcript. Exchanges carry `request`/`response` in
/// `body`; events carry kind-specific fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub seq: u64,
    pub wall_ms: u64,
    pub kind: String,
    #[serde(flatten)]
    pub body: Map<String, Value>,
}

impl TranscriptRecord {
    pub fn request(&self) -> Option<ProviderRequest> {
        self.body.get("request").and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    pub fn response(&self) -> Option<ProviderResponse> {
        self.body.get("response").and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    pub fn field_str(&self, key: &str) -> Option<&str> {
        self.body.get(key).and_then(Value::as_str)
    }

    /// Same record with the wall-clock offset zeroed.
    pub fn normalized(&self) -> Self {
        Self { wall_ms: 0, ..self.clone() }
    }
}

enum Target {
    File(File),
    Memory(Vec<String>),
}

struct SinkState {
    next_seq: u64,
    target: Option<Target>,
}

/// Append-only transcript shared by every agent in a run. Appends are
/// serialized; sequence numbers are dense from 0.
pub struct TranscriptSink {
    opened: Instant,
    state: Mutex<SinkState>,
}

impl TranscriptSink {
    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with_target(Target::File(file)))
    }

    pub fn in_memory() -> Self {
        Self::with_target(Target::Memory(Vec::new()))
    }

    fn with_target(target: Target) -> Self {
        Self {
            opened: Instant::now(),
            state: Mutex::new(SinkState { next_seq: 0, target: Some(target) }),
        }
    }

    pub fn opened_at(&self) -> Instant {
        self.opened
    }

    pub fn record_exchange(
        &self,
        request: &ProviderRequest,
        response: &ProviderResponse,
    ) -> Result<u64, SinkClosed> {
        let mut body = Map::new();
        body.insert("agent".into(), Value::String(request.agent.clone()));
        body.insert("request".into(), serde_json::to_value(request).expect("request serializes"));
        body.insert("response".into(), serde_json::to_value(response).expect("response serializes"));
        self.append("exchange", body)
    }

    /// Records an event. `body` must not use the keys `seq`, `wall_ms` or
    /// `kind`.
    pub fn record_event(&self, kind: &str, body: Value) -> Result<u64, SinkClosed> {
        let body = match body {
            Value::Object(map) => map,
            other => {
                let mut map = Map::new();
                map.insert("value".into(), other);
                map
            }
        };
        debug_assert!(
            !["seq", "wall_ms", "kind"].iter().any(|k| body.contains_key(*k)),
            "event body uses a reserved key"
        );
        self.append(kind, body)
    }

    fn append(&self, kind: &str, body: Map<String, Value>) -> Result<u64, SinkClosed> {
        let mut state = self.state.lock().unwrap();
        let seq = state.next_seq;
        let record = TranscriptRecord {
            seq,
            wall_ms: self.opened.elapsed().as_millis() as u64,
            kind: kind.to_string(),
            body,
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        match state.target.as_mut() {
            None => return Err(SinkClosed),
            Some(Target::File(f)) => {
                // A failed write would leave a gap; treat the sink as closed.
                if writeln!(f, "{line}").is_err() {
                    state.target = None;
                    return Err(SinkClosed);
                }
            }
            Some(Target::Memory(lines)) => lines.push(line),
        }
        state.next_seq += 1;
        Ok(seq)
    }

    pub fn close(&self) {
        let mut state = self.state.lock().unwrap();
        if let Some(Target::File(f)) = state.target.as_mut() {
            let _ = f.flush();
        }
        state.target = None;
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().target.is_none()
    }

    /// Records written so far (memory sinks only; file sinks return empty).
    pub fn records(&self) -> Vec<TranscriptRecord> {
        let state = self.state.lock().unwrap();
        match &state.target {
            Some(Target::Memory(lines)) => lines
                .iter()
                .map(|l| serde_json::from_str(l).expect("own records parse"))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TranscriptReadError {
    #[error("cannot read transcript: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript line {line} is corrupt: {detail}")]
    Corrupt { line: usize, detail: String },
}

pub fn read_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptRecord>, TranscriptReadError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TranscriptRecord =
            serde_json::from_str(&line).map_err(|e| TranscriptReadError::Corrupt {
                line: i + 1,
                detail: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}
