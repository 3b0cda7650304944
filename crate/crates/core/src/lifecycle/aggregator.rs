use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::ensemble::{
    check_weights, default_weights, parse_grid, parse_predictions, rank_percentile, select_best, weighted_blend,
    write_grid, write_predictions, Grid, PredictionTable,
};
use super::{claim_once, LifecycleError};
use crate::agent::{run_agent, AgentSpec, ToolFailure, ToolHost, ToolOutput};
use crate::context::RunContext;
use crate::digest::content_digest;
use crate::provider::ToolCall;
use crate::tools::{self, EXECUTE, READ, SUBMIT, WRITE};
use crate::workspace::{
    exec_program, read_artifact, read_manifest, write_artifact, RepoStatus, Repository, ResultManifest,
    WorkspaceError,
};

pub const AGGREGATOR_MARKER: &str = ".aggregated";
pub const COST_SAFETY_FACTOR: u32 = 3;
/// Floor for a member's inference time when no smoke time was measured.
pub const MIN_MEMBER_COST: Duration = Duration::from_secs(1);
const HOLDER: &str = "aggregator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlendMethod {
    RankBlend,
    WeightedAverage,
    ProbabilityMapBlend { threshold: f64 },
}

impl BlendMethod {
    pub fn keyword(&self) -> &'static str {
        match self {
            Self::RankBlend => "rank_blend",
            Self::WeightedAverage => "weighted_average",
            Self::ProbabilityMapBlend { .. } => "probability_map_blend",
        }
    }

    pub fn parse(keyword: &str, threshold: Option<f64>) -> Result<Self, String> {
        match keyword {
            "rank_blend" => Ok(Self::RankBlend),
            "weighted_average" => Ok(Self::WeightedAverage),
            "probability_map_blend" => match threshold {
                Some(t) if t > 0.0 && t < 1.0 => Ok(Self::ProbabilityMapBlend { threshold: t }),
                _ => Err("probability_map_blend needs a threshold in (0, 1)".into()),
            },
            other => Err(format!("unknown method `{other}`")),
        }
    }

    fn threshold(&self) -> Option<f64> {
        match self {
            Self::ProbabilityMapBlend { threshold } => Some(*threshold),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AggregationDecision {
    SelectBest { repo_index: usize },
    Ensemble { members: Vec<usize>, weights: Vec<f64>, method: BlendMethod },
}

impl AggregationDecision {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::SelectBest { .. } => Ok(()),
            Self::Ensemble { members, weights, method } => {
                if members.len() < 2 {
                    return Err("an ensemble needs at least two members".into());
                }
                let mut sorted = members.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != members.len() {
                    return Err("ensemble members must be distinct".into());
                }
                if weights.iter().any(|w| !(*w > 0.0)) {
                    return Err("ensemble weights must be positive".into());
                }
                check_weights(weights, members.len()).map_err(|e| e.to_string())?;
                if let Some(t) = method.threshold() {
                    if !(t > 0.0 && t < 1.0) {
                        return Err("threshold must lie in (0, 1)".into());
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSubmission {
    /// Relative to the aggregator repository.
    pub predictions_path: String,
    pub inference_command: String,
    pub checkpoint_refs: Vec<(usize, String)>,
    pub decision: AggregationDecision,
    /// Why the aggregator agent was bypassed or overruled, if it was.
    pub forced: Option<String>,
}

/// Candidates that reached the aggregator: active repositories with a
/// valid manifest naming a predictions file.
pub fn collect_candidates(repos: &[Arc<Repository>]) -> Vec<(usize, ResultManifest)> {
    let all: Vec<(usize, ResultManifest)> = repos
        .iter()
        .filter(|r| r.status() == RepoStatus::Active)
        .filter_map(|r| read_manifest(r).ok().map(|m| (r.index, m)))
        .filter(|(_, m)| m.predictions_path.is_some())
        .collect();
    // Keep the most common metric; ties go to the one seen first.
    let mut counts: Vec<((String, bool), usize)> = Vec::new();
    for (_, m) in &all {
        let key = (m.metric_name.clone(), m.direction == crate::workspace::Direction::HigherBetter);
        match counts.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => *c += 1,
            None => counts.push((key, 1)),
        }
    }
    let Some(best) = counts.iter().map(|(_, c)| *c).max() else { return all };
    let key = counts.iter().find(|(_, c)| *c == best).map(|(k, _)| k.clone()).expect("non-empty");
    all.into_iter()
        .filter(|(_, m)| m.metric_name == key.0 && (m.direction == crate::workspace::Direction::HigherBetter) == key.1)
        .collect()
}

/// Measured smoke time per member (at least one second) × members × 3.
pub fn ensemble_cost_estimate(repos: &[Arc<Repository>], members: &[usize]) -> Duration {
    let per: Duration = members
        .iter()
        .filter_map(|i| repos.iter().find(|r| r.index == *i))
        .map(|r| Duration::from_millis(r.smoke_millis().unwrap_or(0)).max(MIN_MEMBER_COST))
        .sum();
    per * COST_SAFETY_FACTOR
}

enum Loaded {
    Table(PredictionTable),
    Grid(Grid),
}

fn load(text: &str, path: &str) -> Result<Loaded, String> {
    if path.ends_with(".grid") {
        parse_grid(text).map(Loaded::Grid).map_err(|e| format!("{path}: {e}"))
    } else {
        parse_predictions(text).map(Loaded::Table).map_err(|e| format!("{path}: {e}"))
    }
}

/// Blends member prediction files (given as `(path, content)`) and returns
/// the output content. Tables are aligned on the first member's ids.
pub fn blend_sources(sources: &[(String, String)], weights: &[f64], method: &BlendMethod) -> Result<String, String> {
    let loaded: Vec<Loaded> = sources.iter().map(|(p, t)| load(t, p)).collect::<Result<_, _>>()?;
    let transform = |v: Vec<f64>| -> Result<Vec<f64>, String> {
        match method {
            BlendMethod::RankBlend => rank_percentile(&v).map_err(|e| e.to_string()),
            _ => Ok(v),
        }
    };
    match &loaded[..] {
        [Loaded::Table(first), ..] => {
            let mut columns = Vec::with_capacity(loaded.len());
            for (k, l) in loaded.iter().enumerate() {
                let Loaded::Table(t) = l else { return Err("cannot mix tables and grids".into()) };
                if t.ids.len() != first.ids.len() {
                    return Err(format!("{} has {} rows, expected {}", sources[k].0, t.ids.len(), first.ids.len()));
                }
                let index: BTreeMap<&str, f64> = t.ids.iter().map(String::as_str).zip(t.scores.iter().copied()).collect();
                let aligned: Vec<f64> = first
                    .ids
                    .iter()
                    .map(|id| index.get(id.as_str()).copied().ok_or_else(|| format!("{} lacks id {id}", sources[k].0)))
                    .collect::<Result<_, _>>()?;
                columns.push(transform(aligned)?);
            }
            let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
            let scores = weighted_blend(&refs, weights, method.threshold()).map_err(|e| e.to_string())?;
            Ok(write_predictions(&PredictionTable { ids: first.ids.clone(), scores }))
        }
        [Loaded::Grid(first), ..] => {
            let mut columns = Vec::with_capacity(loaded.len());
            for (k, l) in loaded.iter().enumerate() {
                let Loaded::Grid(g) = l else { return Err("cannot mix tables and grids".into()) };
                if (g.rows, g.cols) != (first.rows, first.cols) {
                    return Err(format!("{} has shape {}x{}, expected {}x{}", sources[k].0, g.rows, g.cols, first.rows, first.cols));
                }
                columns.push(transform(g.values.clone())?);
            }
            let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
            let values = weighted_blend(&refs, weights, method.threshold()).map_err(|e| e.to_string())?;
            Ok(write_grid(&Grid { rows: first.rows, cols: first.cols, values }))
        }
        [] => Err("no members".into()),
    }
}

/// Output location inside the aggregator repository for a member file.
fn output_path(member_path: &str) -> String {
    if member_path.ends_with(".grid") {
        let base = Path::new(member_path).file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        format!("maps/{base}")
    } else {
        "predictions.csv".into()
    }
}

struct AggregatorHost<'a> {
    ctx: &'a RunContext,
    candidates: &'a [(usize, ResultManifest)],
    deadline: Instant,
    decision: Mutex<Option<AggregationDecision>>,
}

impl AggregatorHost<'_> {
    fn submit(&self, call: &ToolCall) -> Result<AggregationDecision, String> {
        let known = |i: usize| self.candidates.iter().any(|(c, _)| *c == i);
        match call.str_arg("variant") {
            Some("select_best") => {
                let repo = call.args.get("repo").and_then(Value::as_u64).ok_or("select_best needs `repo`")? as usize;
                if !known(repo) {
                    return Err(format!("repository {repo} is not a valid candidate"));
                }
                Ok(AggregationDecision::SelectBest { repo_index: repo })
            }
            Some("ensemble") => {
                let members: Vec<usize> = call
                    .args
                    .get("members")
                    .and_then(Value::as_array)
                    .ok_or("ensemble needs `members`")?
                    .iter()
                    .map(|v| v.as_u64().map(|u| u as usize).ok_or("members must be repository indices"))
                    .collect::<Result<_, _>>()?;
                if let Some(bad) = members.iter().find(|i| !known(**i)) {
                    return Err(format!("repository {bad} is not a valid candidate"));
                }
                let method = BlendMethod::parse(call.str_arg("method").unwrap_or("rank_blend"), call.f64_arg("threshold"))?;
                let weights = match call.args.get("weights").and_then(Value::as_array) {
                    Some(ws) => ws.iter().map(|v| v.as_f64().ok_or("weights must be numbers")).collect::<Result<_, _>>()?,
                    None => self.derived_weights(&members),
                };
                let d = AggregationDecision::Ensemble { members, weights, method };
                d.validate()?;
                Ok(d)
            }
            _ => Err("variant must be \"select_best\" or \"ensemble\"".into()),
        }
    }

    fn derived_weights(&self, members: &[usize]) -> Vec<f64> {
        derive_weights(self.candidates, members)
    }
}

fn derive_weights(candidates: &[(usize, ResultManifest)], members: &[usize]) -> Vec<f64> {
    let picked: Vec<&ResultManifest> =
        members.iter().filter_map(|i| candidates.iter().find(|(c, _)| c == i).map(|(_, m)| m)).collect();
    let values: Vec<f64> = picked.iter().map(|m| m.metric_value).collect();
    let direction = picked.first().map(|m| m.direction).unwrap_or(crate::workspace::Direction::HigherBetter);
    default_weights(&values, direction)
}

impl ToolHost for AggregatorHost<'_> {
    fn execute(&self, call: &ToolCall) -> Result<ToolOutput, ToolFailure> {
        let own = self.ctx.workspace.aggregator_repo();
        let escape = |e: WorkspaceError| match e {
            WorkspaceError::PathEscape(_) => Err(ToolFailure { tool: call.name.clone(), reason: e.to_string() }),
            other => Ok(ToolOutput::text(other.to_string())),
        };
        if let Some(("read", i)) = tools::split_scoped(&call.name) {
            let repo = self.ctx.workspace.repo(i).expect("tool view only lists existing repositories");
            return match read_artifact(repo, call.str_arg("path").unwrap_or(".")) {
                Ok(t) => Ok(ToolOutput::text(t)),
                Err(e) => escape(e),
            };
        }
        match call.name.as_str() {
            READ => match read_artifact(own, call.str_arg("path").unwrap_or(".")) {
                Ok(t) => Ok(ToolOutput::text(t)),
                Err(e) => escape(e),
            },
            WRITE => match write_artifact(own, HOLDER, call.str_arg("path").unwrap_or(""), call.str_arg("content").unwrap_or("")) {
                Ok(()) => Ok(ToolOutput::text("written")),
                Err(e) => escape(e),
            },
            EXECUTE => {
                let remaining = self.deadline.saturating_duration_since(Instant::now());
                if remaining.is_zero() {
                    return Ok(ToolOutput::text("budget exhausted: command not started"));
                }
                let timeout = call
                    .f64_arg("timeout")
                    .filter(|t| t.is_finite() && *t > 0.0)
                    .map(Duration::from_secs_f64)
                    .unwrap_or(remaining)
                    .min(remaining);
                let command = call.str_arg("command").unwrap_or("");
                match exec_program(own, HOLDER, command, timeout, &BTreeMap::new(), &self.ctx.exec_settings()) {
                    Ok(r) => {
                        self.ctx.event(
                            "exec",
                            json!({"agent": HOLDER, "repo": own.index, "command": r.command, "exit_code": r.exit_code,
                                   "timed_out": r.timed_out, "smoke": false, "duration_ms": (r.duration * 1000.0) as u64}),
                        );
                        Ok(ToolOutput { payload: r.render(), exit_status: r.exit_code })
                    }
                    Err(e) => escape(e),
                }
            }
            SUBMIT => Ok(ToolOutput::text(match self.submit(call) {
                Ok(d) => {
                    let text = format!("decision recorded: {}", serde_json::to_string(&d).expect("decision serializes"));
                    *self.decision.lock().unwrap() = Some(d);
                    text
                }
                Err(e) => format!("submission rejected: {e}"),
            })),
            other => Err(ToolFailure { tool: other.into(), reason: "not served by the aggregator host".into() }),
        }
    }
}

fn aggregator_input(ctx: &RunContext, candidates: &[(usize, ResultManifest)]) -> String {
    let n = ctx.workspace.candidate_count();
    let mut s = format!("# Task\n\n{}\n\n# Candidates\n\n", ctx.task.trim_end());
    for (i, m) in candidates {
        let _ = writeln!(
            s,
            "repo {i}: {}={}{} predictions={}",
            m.metric_name,
            m.metric_value,
            m.direction.arrow(),
            m.predictions_path.as_deref().unwrap_or("-")
        );
    }
    let _ = write!(s, "\nRepositories 1..{n} are readable with read_i. Your repository is {}.\n", n + 1);
    s
}

/// Selects or ensembles the candidates into the aggregator repository. At
/// most once per run directory. Candidate repositories are only read.
pub fn run_aggregator(ctx: &RunContext, run_dir: &Path, remaining: Duration) -> Result<FinalSubmission, LifecycleError> {
    claim_once(run_dir, AGGREGATOR_MARKER, "aggregator")?;
    let candidates = collect_candidates(ctx.workspace.candidates());
    if candidates.is_empty() {
        ctx.event("aggregation", json!({"error": "NoValidCandidates"}));
        return Err(LifecycleError::NoValidCandidates);
    }
    let members: Vec<usize> = candidates.iter().map(|(i, _)| *i).collect();
    let estimate = ensemble_cost_estimate(ctx.workspace.candidates(), &members);
    let best = select_best(&candidates).map_err(|e| LifecycleError::Error(e.to_string()))?;
    let select = AggregationDecision::SelectBest { repo_index: best };

    let own = ctx.workspace.aggregator_repo();
    let lease = own.acquire_lease(HOLDER).map_err(|e| LifecycleError::Error(e.to_string()))?;
    let (decision, forced) = if candidates.len() == 1 {
        (select, Some("single candidate".to_string()))
    } else if remaining < estimate {
        (select, Some(format!("remaining budget {:.3}s below ensemble cost estimate {:.3}s", remaining.as_secs_f64(), estimate.as_secs_f64())))
    } else {
        let n = ctx.workspace.candidate_count();
        let mut tool_names: Vec<String> = (1..=n).map(|i| tools::scoped("read", i)).collect();
        tool_names.extend([WRITE, EXECUTE, SUBMIT].map(String::from));
        let spec = AgentSpec::new(HOLDER, ctx.prompts.aggregator.clone(), tool_names)
            .with_limits(ctx.config.limits.agent_steps_subagent, ctx.config.limits.observation_cap)
            .with_model(ctx.model());
        let deadline = Instant::now() + remaining;
        let host = AggregatorHost { ctx, candidates: &candidates, deadline, decision: Mutex::new(None) };
        let outcome = run_agent(&spec, &aggregator_input(ctx, &candidates), &host, ctx.env(), deadline);
        if let Some(e) = &outcome.provider_error {
            ctx.record_fault(e.clone());
        }
        match host.decision.into_inner().unwrap() {
            Some(d) => (d, None),
            None => (select, Some("no valid submission".to_string())),
        }
    };

    let submission = materialize(ctx, own, &candidates, decision, forced).map_err(LifecycleError::Error)?;
    drop(lease);
    let digest = read_artifact(own, &submission.predictions_path).map(content_digest).unwrap_or_default();
    ctx.event(
        "aggregation",
        json!({
            "decision": submission.decision,
            "forced": submission.forced,
            "predictions_path": submission.predictions_path,
            "predictions_digest": digest,
            "inference_command": submission.inference_command,
            "candidates": members,
            "cost_estimate_ms": estimate.as_millis() as u64,
            "remaining_ms": remaining.as_millis() as u64,
        }),
    );
    Ok(submission)
}

fn shell_quote(s: &str) -> String {
    if s.bytes().all(|b| b.is_ascii_alphanumeric() || b"/._-,=".contains(&b)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', "'\\''"))
    }
}

fn materialize(
    ctx: &RunContext,
    own: &Repository,
    candidates: &[(usize, ResultManifest)],
    decision: AggregationDecision,
    forced: Option<String>,
) -> Result<FinalSubmission, String> {
    let manifest = |i: usize| candidates.iter().find(|(c, _)| *c == i).map(|(_, m)| m).ok_or(format!("no candidate {i}"));
    let repo = |i: usize| ctx.workspace.repo(i).ok_or(format!("no repository {i}"));
    let (predictions_path, inference_command, checkpoint_refs) = match &decision {
        AggregationDecision::SelectBest { repo_index } => {
            let m = manifest(*repo_index)?;
            let src = m.predictions_path.as_deref().expect("candidates name predictions");
            let bytes = fs::read(repo(*repo_index)?.resolve(src).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let out = output_path(src);
            write_artifact(own, HOLDER, &out, &bytes).map_err(|e| e.to_string())?;
            let command = match &m.inference_command {
                Some(c) => format!("cd ../repo_{repo_index} && {c}"),
                None => format!("cp ../repo_{repo_index}/{} {out}", shell_quote(src)),
            };
            let refs = m.checkpoints.iter().map(|c| (*repo_index, c.clone())).collect();
            (out, command, refs)
        }
        AggregationDecision::Ensemble { members, weights, method } => {
            let mut sources = Vec::with_capacity(members.len());
            let mut refs = Vec::new();
            for i in members {
                let m = manifest(*i)?;
                let src = m.predictions_path.clone().expect("candidates name predictions");
                let text = read_artifact(repo(*i)?, &src).map_err(|e| e.to_string())?;
                sources.push((format!("../repo_{i}/{src}"), text));
                refs.extend(m.checkpoints.iter().map(|c| (*i, c.clone())));
            }
            let out = output_path(&sources[0].0);
            let content = blend_sources(&sources, weights, method)?;
            write_artifact(own, HOLDER, &out, &content).map_err(|e| e.to_string())?;
            let ws: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
            let mut command = format!("modelsmith blend --method {} --weights {}", method.keyword(), ws.join(","));
            if let Some(t) = method.threshold() {
                let _ = write!(command, " --threshold {t}");
            }
            let _ = write!(command, " --out {out}");
            for (p, _) in &sources {
                let _ = write!(command, " {}", shell_quote(p));
            }
            (out, command, refs)
        }
    };
    let submission = FinalSubmission { predictions_path, inference_command, checkpoint_refs, decision, forced };
    write_artifact(own, HOLDER, "RUNME", format!("{}\n", submission.inference_command)).map_err(|e| e.to_string())?;
    let record = serde_json::to_string_pretty(&submission).expect("submission serializes");
    write_artifact(own, HOLDER, "decision.json", record + "\n").map_err(|e| e.to_string())?;
    Ok(submission)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_validation() {
        let ok = AggregationDecision::Ensemble { members: vec![1, 2], weights: vec![0.3, 0.7], method: BlendMethod::RankBlend };
        assert!(ok.validate().is_ok());
        let zero = AggregationDecision::Ensemble { members: vec![1, 2], weights: vec![1.0, 0.0], method: BlendMethod::RankBlend };
        assert!(zero.validate().is_err());
        let one = AggregationDecision::Ensemble { members: vec![1], weights: vec![1.0], method: BlendMethod::RankBlend };
        assert!(one.validate().is_err());
        assert!(BlendMethod::parse("probability_map_blend", Some(1.5)).is_err());
        assert_eq!(BlendMethod::parse("probability_map_blend", Some(0.8)), Ok(BlendMethod::ProbabilityMapBlend { threshold: 0.8 }));
    }

    #[test]
    fn rank_blend_of_tables_aligns_ids() {
        let a = ("a.csv".to_string(), "id,score\nx,0.1\ny,0.9\nz,0.5\n".to_string());
        let b = ("b.csv".to_string(), "id,score\nz,3\nx,1\ny,2\n".to_string());
        let out = blend_sources(&[a, b], &[0.5, 0.5], &BlendMethod::RankBlend).unwrap();
        // a ranks: x 0, y 1, z 0.5; b ranks: x 0, y 0.5, z 1
        assert_eq!(out, "id,score\nx,0\ny,0.75\nz,0.75\n");
    }
}
