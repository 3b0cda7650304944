//! Engine tool registry: the closed set of tool names an agent may ever see,
//! and their argument descriptors.
//!
//! Sub-agent tools are unscoped (`read`, `write`, `execute`, `search`) because
//! each sub-agent is bound to one repository. Manager tools are scoped by
//! repository index (`designer_3`, `read_3`, ...).

use crate::provider::{ParamKind, ParamSpec, ToolDescriptor};

pub const READ: &str = "read";
pub const WRITE: &str = "write";
pub const EXECUTE: &str = "execute";
pub const SEARCH: &str = "search";
pub const SUBMIT: &str = "submit";
pub const ACTIVATE: &str = "activate";

const BASE: &[&str] = &[READ, WRITE, EXECUTE, SEARCH, SUBMIT, ACTIVATE];
const SCOPED: &[&str] = &["read", "designer", "coder", "tuner", "prune"];

/// Splits `designer_3` into `("designer", 3)`.
pub fn split_scoped(name: &str) -> Option<(&str, usize)> {
    let (base, idx) = name.rsplit_once('_')?;
    if !SCOPED.contains(&base) || idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let idx: usize = idx.parse().ok()?;
    (idx >= 1).then_some((base, idx))
}

pub fn scoped(base: &str, index: usize) -> String {
    format!("{base}_{index}")
}

pub fn is_known_tool(name: &str) -> bool {
    BASE.contains(&name) || split_scoped(name).is_some()
}

fn p(name: &str, kind: ParamKind, required: bool, description: &str) -> ParamSpec {
    ParamSpec { name: name.into(), kind, required, description: description.into() }
}

pub fn descriptor(name: &str) -> Option<ToolDescriptor> {
    use ParamKind::*;
    let (description, params) = match name {
        READ => (
            "Read a file or list a directory in your repository (path relative to the repository root).".to_string(),
            vec![p("path", String, true, "relative path; use \".\" for the root")],
        ),
        WRITE => (
            "Create or overwrite a file in your repository. data/ is read-only.".to_string(),
            vec![
                p("path", String, true, "relative path"),
                p("content", String, true, "full file content"),
            ],
        ),
        EXECUTE => (
            "Run a shell command with the repository root as working directory.".to_string(),
            vec![
                p("command", String, true, "shell command"),
                p("timeout", Number, false, "seconds; clamped to the remaining budget"),
            ],
        ),
        SEARCH => (
            "Search the web for references and best practices.".to_string(),
            vec![p("query", String, true, "search query")],
        ),
        SUBMIT => (
            "Submit the final aggregation decision: select one repository or ensemble several.".to_string(),
            vec![
                p("variant", String, true, "\"select_best\" or \"ensemble\""),
                p("repo", Integer, false, "repository index for select_best"),
                p("members", Array, false, "repository indices for ensemble"),
                p("weights", Array, false, "positive weights summing to 1; derived from metrics when omitted"),
                p("method", String, false, "\"rank_blend\", \"weighted_average\" or \"probability_map_blend\""),
                p("threshold", Number, false, "binarization threshold for probability_map_blend"),
            ],
        ),
        ACTIVATE => (
            "Record the environment activation prefix prepended to every later command.".to_string(),
            vec![
                p("prefix", String, true, "shell prefix, e.g. \". env/bin/activate &&\""),
                p("environment", String, false, "environment name"),
            ],
        ),
        _ => {
            let (base, i) = split_scoped(name)?;
            match base {
                "read" => (
                    format!("Read a file or list a directory in repository {i}."),
                    vec![p("path", String, true, "relative path; use \".\" for the root")],
                ),
                "designer" => (
                    format!("Invoke the designer on repository {i}: writes an initial plan.md, or revises it in light of results."),
                    vec![p("instructions", String, false, "optional guidance for this invocation")],
                ),
                "coder" => (
                    format!("Invoke the coder on repository {i}: implements or fixes src/ and config/ from plan.md and verifies with a smoke run."),
                    vec![p("instructions", String, false, "optional guidance for this invocation")],
                ),
                "tuner" => (
                    format!("Invoke the tuner on repository {i}: runs training, tunes config/, and writes result/manifest."),
                    vec![
                        p("tuning_budget", Number, true, "maximum tuning time in seconds"),
                        p("instructions", String, false, "optional guidance for this invocation"),
                    ],
                ),
                "prune" => (
                    format!("Discard repository {i}: no further sub-agent work; artifacts stay readable."),
                    vec![],
                ),
                _ => return None,
            }
        }
    };
    Some(ToolDescriptor { name: name.to_string(), description, params })
}
