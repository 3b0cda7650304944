//! Shared builders for the integration tests: scripted fixtures, task
//! bundles and run contexts over temporary directories.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tempfile::TempDir;

use modelsmith::config::RunConfig;
use modelsmith::context::{Budget, RunContext};
use modelsmith::provider::{
    FixturePack, Matcher, ProviderResponse, ScriptStep, ScriptedBackend, ToolCall, TranscriptRecord, TranscriptSink,
};
use modelsmith::workspace::{
    init_repositories, tree_manifest, DataCopyMode, Repository, SearchBackend, SearchResult, SearchUnavailable,
};

pub const TASK: &str = "Predict y from x for every row of data/test.csv. Metric: rmse on hidden labels.\n";

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/toy")
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_modelsmith"))
}

pub fn call(name: &str, args: Value) -> ToolCall {
    ToolCall::new(name, args)
}

/// Per-agent scripted streams built turn by turn.
#[derive(Default, Clone)]
pub struct Script {
    pub pack: FixturePack,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn turn(mut self, agent: &str, text: &str, calls: Vec<ToolCall>) -> Self {
        self.push(agent, text, calls);
        self
    }

    pub fn push(&mut self, agent: &str, text: &str, calls: Vec<ToolCall>) {
        let stream = self.pack.streams.entry(agent.to_string()).or_default();
        let k = stream.steps.len();
        stream.steps.push(ScriptStep { matcher: Matcher::ByIndex(k), response: ProviderResponse::calls(text, calls) });
    }

    pub fn backend(&self) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(self.pack.clone()))
    }

    pub fn jsonl(&self) -> String {
        self.pack.to_jsonl()
    }
}

/// Writes a small bundle: task.md plus data/{train,test}.csv.
pub fn make_bundle(dir: &Path) -> PathBuf {
    let bundle = dir.join("bundle");
    fs::create_dir_all(bundle.join("data")).unwrap();
    fs::write(bundle.join("task.md"), TASK).unwrap();
    fs::write(bundle.join("data/train.csv"), "id,x,y\na,1,2\nb,2,4\nc,3,6\n").unwrap();
    fs::write(bundle.join("data/test.csv"), "id,x\nd,4\ne,5\n").unwrap();
    bundle
}

pub fn config(n: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.repos_n = n;
    c.budget.total_seconds = 600.0;
    c.budget.grace_seconds = 2.0;
    c.budget.aggregator_reserve_seconds = 60.0;
    c.limits.smoke_timeout = 30.0;
    c.data_copy = DataCopyMode::Copy;
    c
}

pub struct Harness {
    pub dir: TempDir,
    pub run_dir: PathBuf,
    pub bundle: PathBuf,
    pub ctx: RunContext,
}

impl Harness {
    pub fn new(config: RunConfig, script: &Script) -> Self {
        Self::with_backend(config, script.backend())
    }

    pub fn with_backend(config: RunConfig, backend: Arc<dyn modelsmith::provider::ProviderBackend>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let bundle = make_bundle(dir.path());
        let run_dir = dir.path().join("run");
        fs::create_dir_all(&run_dir).unwrap();
        let workspace = init_repositories(&run_dir, config.repos_n, &bundle, DataCopyMode::Copy).unwrap();
        let sink = Arc::new(TranscriptSink::in_memory());
        let mut budget = Budget::from_config(&config);
        budget.started_at = sink.opened_at();
        let ctx = RunContext::new(config, workspace, backend, sink, TASK, budget);
        Self { dir, run_dir, bundle, ctx }
    }

    pub fn repo(&self, i: usize) -> &Arc<Repository> {
        self.ctx.workspace.repo(i).unwrap()
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.ctx.sink.records()
    }

    pub fn events(&self, kind: &str) -> Vec<TranscriptRecord> {
        self.records().into_iter().filter(|r| r.kind == kind).collect()
    }

    /// Exec events recorded by agent `label`.
    pub fn execs(&self, label: &str) -> Vec<TranscriptRecord> {
        self.events("exec").into_iter().filter(|r| r.field_str("agent") == Some(label)).collect()
    }

    pub fn exchanges(&self, label: &str) -> Vec<TranscriptRecord> {
        self.events("exchange").into_iter().filter(|r| r.field_str("agent") == Some(label)).collect()
    }

    pub fn tree(&self, i: usize) -> BTreeMap<String, String> {
        tree_manifest(self.repo(i).root())
    }
}

pub fn far() -> Instant {
    Instant::now() + Duration::from_secs(600)
}

/// Writes straight into a repository, bypassing leases (test setup only).
pub fn put(repo: &Repository, rel: &str, content: &str) {
    let path = repo.root().join(rel);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, content).unwrap();
}

pub fn manifest_text(name: &str, value: f64, direction: &str, predictions: Option<&str>) -> String {
    let mut s = format!("metric_name = {name}\nmetric_value = {value}\ndirection = {direction}\nruns_completed = 1\n");
    if let Some(p) = predictions {
        s.push_str(&format!("predictions_path = {p}\n"));
    }
    s
}

/// Shell training script: copies config/preds.csv to result/ and writes a
/// manifest whose value is read from config/value. `--smoke` only checks
/// the inputs exist.
pub const TRAIN_SH: &str = r#"set -e
if [ "$1" = "--smoke" ]; then test -f config/value; echo "smoke ok"; exit 0; fi
mkdir -p result
cp config/preds.csv result/predictions.csv
v=$(cat config/value)
printf 'metric_name = rmse\nmetric_value = %s\ndirection = lower\npredictions_path = result/predictions.csv\nruns_completed = 1\n' "$v" > result/manifest
echo "rmse=$v"
"#;

pub fn json_args(pairs: &[(&str, Value)]) -> Value {
    let mut m = serde_json::Map::new();
    for (k, v) in pairs {
        m.insert((*k).to_string(), v.clone());
    }
    Value::Object(m)
}

/// Search backend that counts queries.
#[derive(Default)]
pub struct CountingSearch {
    pub calls: AtomicUsize,
}

impl SearchBackend for CountingSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>, SearchUnavailable> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(vec![SearchResult {
            title: format!("result for {query}"),
            url: "https://example.org/ref".into(),
            snippet: String::new(),
        }])
    }
}

/// Live processes whose working directory lies under `dir`.
pub fn processes_under(dir: &Path) -> Vec<u32> {
    let dir = fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir("/proc") else { return out };
    for e in entries.filter_map(Result::ok) {
        let Ok(pid) = e.file_name().to_string_lossy().parse::<u32>() else { continue };
        if let Ok(cwd) = fs::read_link(e.path().join("cwd")) {
            if cwd.starts_with(&dir) {
                // Zombies have no cwd link, so anything here is alive.
                out.push(pid);
            }
        }
    }
    out
}

pub fn empty() -> Value {
    json!({})
}

/// Writes `fixture.jsonl` and `run.conf` for a scripted run into `dir`.
pub fn write_run_files(dir: &Path, script: &Script, n: usize, extra: &str) -> PathBuf {
    fs::write(dir.join("fixture.jsonl"), script.jsonl()).unwrap();
    let conf = dir.join("run.conf");
    fs::write(
        &conf,
        format!(
            "provider.mode = scripted\nprovider.fixture_path = fixture.jsonl\nrepos_n = {n}\n\
             budget.total_seconds = 600\nbudget.grace_seconds = 2\nbudget.aggregator_reserve_seconds = 60\n\
             limits.smoke_timeout = 30\nworkspace.data_copy = copy\npaths.run_dir = run\n{extra}"
        ),
    )
    .unwrap();
    conf
}

/// Seven repositories: seven plans, four implementations and tuning runs,
/// one plan revision, three prunes, then a rank-blend ensemble of the four
/// trained repositories.
pub fn m1_script() -> Script {
    let mut s = Script::new();
    s.push("setup", "Nothing to install.", vec![]);
    let scoped = |base: &str, range: std::ops::RangeInclusive<usize>, args: Value| -> Vec<ToolCall> {
        range.map(|i| call(&format!("{base}_{i}"), args.clone())).collect()
    };
    s.push("manager", "Plans for the first four.", scoped("designer", 1..=4, empty()));
    s.push("manager", "Plans for the rest.", scoped("designer", 5..=7, empty()));
    s.push("manager", "Implement the four strongest plans.", scoped("coder", 1..=4, empty()));
    s.push("manager", "Train them.", scoped("tuner", 1..=4, json!({"tuning_budget": 60})));
    let mut calls = vec![call("read_5", json!({"path": "plan.md"}))];
    calls.extend(scoped("prune", 5..=7, empty()));
    s.push("manager", "Discard the untried plans.", calls);
    s.push("manager", "Revisit the first plan.", vec![call("designer_1", json!({"instructions": "account for the validation result"}))]);
    s.push("manager", "Four trained candidates; done.", vec![]);
    for i in 1..=7 {
        let label = format!("designer_{i}");
        let plan = format!("# Plan {i}\n\nVariant {i} of a linear model.\n");
        s.push(&label, "Writing the plan.", vec![call("write", json!({"path": "plan.md", "content": plan}))]);
        s.push(&label, "Plan written.", vec![]);
    }
    let revised = "# Plan 1\n\nVariant 1 of a linear model.\n\n## Revision\n\nrmse 0.52; add an interaction term.\n";
    s.push("designer_1", "Revising.", vec![call("write", json!({"path": "plan.md", "content": revised}))]);
    s.push("designer_1", "Revised.", vec![]);
    for (i, (value, preds)) in m1_results().into_iter().enumerate() {
        let i = i + 1;
        let coder = format!("coder_{i}");
        s.push(
            &coder,
            "Implementing.",
            vec![
                call("write", json!({"path": "src/train.sh", "content": TRAIN_SH})),
                call("write", json!({"path": "config/value", "content": format!("{value}\n")})),
                call("write", json!({"path": "config/preds.csv", "content": preds})),
            ],
        );
        s.push(&coder, "Smoke test.", vec![call("execute", json!({"command": "sh src/train.sh --smoke"}))]);
        s.push(&coder, "Verified.", vec![]);
        let tuner = format!("tuner_{i}");
        s.push(&tuner, "Training.", vec![call("execute", json!({"command": "sh src/train.sh"}))]);
        s.push(&tuner, "Trained.", vec![]);
    }
    s.push("aggregator", "Checking a manifest.", vec![call("read_1", json!({"path": "result/manifest"}))]);
    s.push(
        "aggregator",
        "Blending all four by rank.",
        vec![call("submit", json!({"variant": "ensemble", "members": [1, 2, 3, 4], "method": "rank_blend"}))],
    );
    s.push("aggregator", "Submitted.", vec![]);
    s
}

/// (rmse, predictions table) of the four trained M1 repositories.
pub fn m1_results() -> Vec<(f64, String)> {
    let scores = [[0.2, 0.9, 0.4, 0.7], [0.1, 0.8, 0.8, 0.3], [0.5, 0.6, 0.2, 0.9], [0.3, 0.3, 0.7, 0.6]];
    let values = [0.52, 0.48, 0.61, 0.55];
    values
        .iter()
        .zip(scores)
        .map(|(v, s)| {
            let mut t = String::from("id,score\n");
            for (id, x) in ["d", "e", "f", "g"].iter().zip(s) {
                t.push_str(&format!("{id},{x}\n"));
            }
            (*v, t)
        })
        .collect()
}
