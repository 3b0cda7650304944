use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{execute_run, ExitStatus, RunOptions, INPUT_DIR, TRANSCRIPT};
use crate::config::load_config;
use crate::digest::content_digest;
use crate::provider::{
    read_transcript, FixturePack, Matcher, ProviderResponse, ScriptStep, ScriptedBackend, TranscriptRecord,
};
use crate::workspace::{repos_dir, tree_manifest};

#[derive(Debug)]
pub struct ReplayOutcome {
    pub status: ExitStatus,
    pub diagnostic: Option<String>,
}

impl ReplayOutcome {
    fn new(status: ExitStatus, diagnostic: impl Into<String>) -> Self {
        Self { status, diagnostic: Some(diagnostic.into()) }
    }
}

fn is_error_stop(r: &ProviderResponse) -> bool {
    *r == ProviderResponse::error()
}

/// Per-agent fixture streams that serve the recorded responses, each step
/// bound to the digest of the request's final message. Exchanges recorded
/// for failed provider calls are left out.
pub fn replay_fixture(records: &[TranscriptRecord]) -> FixturePack {
    let mut pack = FixturePack::default();
    for r in records.iter().filter(|r| r.kind == "exchange") {
        let (Some(req), Some(resp)) = (r.request(), r.response()) else { continue };
        if is_error_stop(&resp) {
            continue;
        }
        pack.streams.entry(req.agent.clone()).or_default().steps.push(ScriptStep {
            matcher: Matcher::ByDigest(content_digest(req.final_content())),
            response: resp,
        });
    }
    pack
}

fn streams(records: &[TranscriptRecord]) -> BTreeMap<String, Vec<&TranscriptRecord>> {
    let mut out: BTreeMap<String, Vec<&TranscriptRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == "exchange") {
        out.entry(r.field_str("agent").unwrap_or("").to_string()).or_default().push(r);
    }
    out
}

/// First original sequence number whose exchange differs from the replay.
fn first_divergence(original: &[TranscriptRecord], replayed: &[TranscriptRecord]) -> Option<(u64, String)> {
    let a = streams(original);
    let b = streams(replayed);
    let mut first: Option<(u64, String)> = None;
    let mut note = |seq: u64, detail: String| {
        if first.as_ref().is_none_or(|(s, _)| seq < *s) {
            first = Some((seq, detail));
        }
    };
    for (agent, recs) in &a {
        let other = b.get(agent).map(Vec::as_slice).unwrap_or(&[]);
        for (i, r) in recs.iter().enumerate() {
            match other.get(i) {
                None => {
                    note(r.seq, format!("agent `{agent}` made no exchange {i} on replay"));
                    break;
                }
                Some(o) if o.body != r.body => {
                    note(r.seq, format!("agent `{agent}` exchange {i} differs"));
                    break;
                }
                Some(_) => {}
            }
        }
        if other.len() > recs.len() {
            let last = recs.last().map_or(0, |r| r.seq);
            note(last, format!("agent `{agent}` made {} extra exchange(s) on replay", other.len() - recs.len()));
        }
    }
    for (agent, recs) in &b {
        if !a.contains_key(agent) {
            note(0, format!("agent `{agent}` only exchanged on replay ({} exchange(s))", recs.len()));
        }
    }
    first
}

fn end_status(records: &[TranscriptRecord]) -> Option<i64> {
    records
        .iter()
        .rev()
        .find(|r| r.kind == "run" && r.field_str("phase") == Some("end"))
        .and_then(|r| r.body.get("exit_code"))
        .and_then(serde_json::Value::as_i64)
}

/// Re-executes a scripted run from its own transcript and compares the
/// exchanges and the repository trees with the original.
pub fn cmd_replay(run_dir: &Path) -> ReplayOutcome {
    let original = match read_transcript(run_dir.join(TRANSCRIPT)) {
        Ok(r) if !r.is_empty() => r,
        Ok(_) => return ReplayOutcome::new(ExitStatus::TranscriptCorrupt, "transcript is empty"),
        Err(e) => return ReplayOutcome::new(ExitStatus::TranscriptCorrupt, e.to_string()),
    };
    let Some(start) = original.iter().find(|r| r.kind == "run" && r.field_str("phase") == Some("start")) else {
        return ReplayOutcome::new(ExitStatus::TranscriptCorrupt, "transcript has no run start record");
    };
    if start.field_str("mode") != Some("scripted") {
        return ReplayOutcome::new(ExitStatus::ReplayRefused, "replay requires scripted mode");
    }
    let input = run_dir.join(INPUT_DIR);
    let mut config = match load_config(input.join("run.conf")) {
        Ok(c) => c,
        Err(e) => return ReplayOutcome::new(ExitStatus::TranscriptCorrupt, format!("recorded config: {e}")),
    };
    let scratch = run_dir.join(format!(".replay-{}", std::process::id()));
    let _ = fs::remove_dir_all(&scratch);
    config.paths.run_dir = scratch.clone();
    let backend = Arc::new(ScriptedBackend::new(replay_fixture(&original)));
    let options = RunOptions { backend: Some(backend), ..RunOptions::default() };
    let rerun = execute_run(&input.join("bundle"), config, options);

    let result = (|| {
        let replayed = read_transcript(scratch.join(TRANSCRIPT))
            .map_err(|e| ReplayOutcome::new(ExitStatus::ReplayDivergence, format!("replay produced no transcript: {e}")))?;
        if let Some((seq, detail)) = first_divergence(&original, &replayed) {
            return Err(ReplayOutcome::new(ExitStatus::ReplayDivergence, format!("diverged at seq {seq}: {detail}")));
        }
        if end_status(&original) != Some(i64::from(rerun.status.code())) {
            return Err(ReplayOutcome::new(
                ExitStatus::ReplayDivergence,
                format!("exit status {:?} on replay vs {:?} recorded", rerun.status.code(), end_status(&original)),
            ));
        }
        let a = tree_manifest(&repos_dir(run_dir));
        let b = tree_manifest(&repos_dir(&scratch));
        if a != b {
            let path = a
                .iter()
                .find(|(p, d)| b.get(*p) != Some(d))
                .map(|(p, _)| p.clone())
                .or_else(|| b.keys().find(|p| !a.contains_key(*p)).cloned())
                .unwrap_or_default();
            return Err(ReplayOutcome::new(ExitStatus::ReplayDivergence, format!("artifact digest differs: repos/{path}")));
        }
        Ok(ReplayOutcome { status: ExitStatus::Ok, diagnostic: None })
    })();
    let _ = fs::remove_dir_all(&scratch);
    result.unwrap_or_else(|e| e)
}
