use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use super::{ExitStatus, TRANSCRIPT};
use crate::provider::{read_transcript, TranscriptRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    JsonLines,
}

fn u(v: Option<&Value>) -> u64 {
    v.and_then(Value::as_u64).unwrap_or(0)
}

/// Report records derived from transcript records alone. Each record has a
/// `type` of `run`, `repo`, `invocation`, `budget`, `provider` or
/// `aggregation`.
pub fn build_report(records: &[TranscriptRecord]) -> Result<Vec<Value>, String> {
    let start = records
        .iter()
        .find(|r| r.kind == "run" && r.field_str("phase") == Some("start"))
        .ok_or("transcript has no run start record")?;
    let end = records.iter().rev().find(|r| r.kind == "run" && r.field_str("phase") == Some("end"));
    let repos_n = u(start.body.get("repos_n")) as usize;
    let mut out = vec![json!({
        "type": "run",
        "repos_n": repos_n,
        "mode": start.body.get("mode"),
        "exit_code": end.and_then(|e| e.body.get("exit_code")),
        "status": end.and_then(|e| e.body.get("status")),
        "records": records.len(),
    })];

    let pruned: Vec<u64> = records.iter().filter(|r| r.kind == "prune").map(|r| u(r.body.get("repo"))).collect();
    let mut invocations: BTreeMap<u64, Vec<Value>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == "report") {
        let repo = u(r.body.get("repo"));
        let Some(body) = r.body.get("report") else { continue };
        invocations.entry(repo).or_default().push(json!({
            "type": "invocation",
            "seq": r.seq,
            "wall_ms": r.wall_ms,
            "repo": repo,
            "kind": body.get("kind"),
            "status": body.get("status"),
            "duration": body.get("duration"),
            "metric": body.get("metric"),
            "provider_calls": body.get("provider_calls"),
            "debug_iterations": body.get("debug_iterations"),
            "runs_launched": body.get("runs_launched"),
        }));
    }
    for i in 1..=repos_n as u64 {
        let list = invocations.remove(&i).unwrap_or_default();
        let last_metric = list.iter().rev().find_map(|v| v.get("metric").filter(|m| !m.is_null()).cloned());
        out.push(json!({
            "type": "repo",
            "repo": i,
            "status": if pruned.contains(&i) { "pruned" } else { "active" },
            "invocations": list.len(),
            "metric": last_metric,
        }));
        out.extend(list);
    }

    let budget = records.iter().rev().find(|r| r.kind == "budget");
    let total_ms = u(start.body.get("total_ms"));
    let elapsed_ms = end.map(|e| u(e.body.get("elapsed_ms"))).unwrap_or_else(|| records.last().map_or(0, |r| r.wall_ms));
    out.push(json!({
        "type": "budget",
        "elapsed_ms": elapsed_ms,
        "total_ms": total_ms,
        "utilization": if total_ms == 0 { 0.0 } else { elapsed_ms as f64 / total_ms as f64 },
        "stop_cause": budget.and_then(|b| b.body.get("stop_cause")),
    }));

    let mut calls: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == "exchange") {
        let usage = r.body.get("response").and_then(|v| v.get("usage"));
        let e = calls.entry(r.field_str("agent").unwrap_or("").to_string()).or_default();
        e.0 += 1;
        e.1 += u(usage.and_then(|v| v.get("input")));
        e.2 += u(usage.and_then(|v| v.get("output")));
    }
    let totals = calls.values().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    for (agent, (n, i, o)) in calls {
        out.push(json!({"type": "provider", "agent": agent, "calls": n, "input_tokens": i, "output_tokens": o}));
    }
    out.push(json!({"type": "provider", "agent": "total", "calls": totals.0, "input_tokens": totals.1, "output_tokens": totals.2}));

    if let Some(a) = records.iter().rev().find(|r| r.kind == "aggregation") {
        let mut v = Value::Object(a.body.clone());
        v["type"] = json!("aggregation");
        out.push(v);
    }
    Ok(out)
}

fn text_line(v: &Value) -> String {
    let s = |k: &str| match v.get(k) {
        Some(Value::String(x)) => x.clone(),
        Some(Value::Null) | None => "-".into(),
        Some(other) => other.to_string(),
    };
    let metric = |m: Option<&Value>| match m {
        Some(m) if !m.is_null() => {
            let arrow = if m.get("direction").and_then(Value::as_str) == Some("LowerBetter") { "↓" } else { "↑" };
            format!(" {}={}{arrow}", m.get("name").and_then(Value::as_str).unwrap_or("?"), m.get("value").unwrap_or(&Value::Null))
        }
        _ => String::new(),
    };
    match v.get("type").and_then(Value::as_str) {
        Some("run") => format!("run: {} repositories, {} mode, exit {} ({})", s("repos_n"), s("mode"), s("exit_code"), s("status")),
        Some("repo") => format!("repo {}: {}, {} invocation(s){}", s("repo"), s("status"), s("invocations"), metric(v.get("metric"))),
        Some("invocation") => format!(
            "  [seq {}] {} {} {:.3}s calls={}{}",
            s("seq"),
            s("kind"),
            s("status"),
            v.get("duration").and_then(Value::as_f64).unwrap_or(0.0),
            s("provider_calls"),
            metric(v.get("metric")),
        ),
        Some("budget") => format!(
            "budget: {:.3}s of {:.3}s used ({:.2}%), manager stop: {}",
            v["elapsed_ms"].as_u64().unwrap_or(0) as f64 / 1000.0,
            v["total_ms"].as_u64().unwrap_or(0) as f64 / 1000.0,
            v["utilization"].as_f64().unwrap_or(0.0) * 100.0,
            s("stop_cause"),
        ),
        Some("provider") => format!("provider: {} {} call(s), {} input / {} output tokens", s("agent"), s("calls"), s("input_tokens"), s("output_tokens")),
        Some("aggregation") => {
            let d = v.get("decision").cloned().unwrap_or(Value::Null);
            let mut line = match d.get("variant").and_then(Value::as_str) {
                Some("select_best") => format!("aggregation: select_best repo {}", d["repo_index"]),
                Some("ensemble") => format!(
                    "aggregation: ensemble {} members {} weights {}",
                    d["method"]["kind"].as_str().unwrap_or("?"),
                    d["members"],
                    d["weights"]
                ),
                _ => format!("aggregation: {}", v.get("error").map_or("-".into(), Value::to_string)),
            };
            if let Some(Value::String(f)) = v.get("forced") {
                let _ = write!(line, " (forced: {f})");
            }
            line
        }
        _ => v.to_string(),
    }
}

/// `report <run_dir>`; returns the rendered output.
pub fn cmd_report(run_dir: &Path, format: ReportFormat) -> Result<String, (ExitStatus, String)> {
    let corrupt = |d: String| (ExitStatus::TranscriptCorrupt, d);
    let records = read_transcript(run_dir.join(TRANSCRIPT)).map_err(|e| corrupt(e.to_string()))?;
    if records.is_empty() {
        return Err(corrupt("transcript is empty".into()));
    }
    let lines = build_report(&records).map_err(corrupt)?;
    Ok(lines
        .iter()
        .map(|v| match format {
            ReportFormat::JsonLines => v.to_string(),
            ReportFormat::Text => text_line(v),
        } + "\n")
        .collect())
}
