//! Isolated solution repositories and their repository-scoped tools.
//!
//! Layout of a run directory:
//!
//! ```text
//! <run_dir>/repos/repo_1 .. repo_n   candidate solutions
//! <run_dir>/repos/repo_{n+1}         aggregator output
//! ```
//!
//! Each candidate holds `data/` (read-only copy of the bundle data),
//! `plan.md`, `src/`, `config/` and `result/`.

mod exec;
mod manifest;
mod search;

pub use exec::{exec_program, ExecSettings, ExecutionRecord, DEFAULT_TAIL_CAP};
pub use manifest::{read_manifest, Direction, ManifestError, ResultManifest, MANIFEST_PATH};
pub use search::{
    FixtureSearch, LiveSearch, NoSearch, SearchBackend, SearchResult, SearchUnavailable,
    DEFAULT_MAX_RESULTS,
};

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::content_digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepoStatus {
    Active,
    Pruned,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    Data,
    Plan,
    Code,
    Config,
    Result,
}

impl ArtifactKind {
    pub fn subpath(self) -> &'static str {
        match self {
            ArtifactKind::Data => "data",
            ArtifactKind::Plan => "plan.md",
            ArtifactKind::Code => "src",
            ArtifactKind::Config => "config",
            ArtifactKind::Result => "result",
        }
    }

    /// Classifies a repository-relative path by its first component after
    /// `..` is folded in, so `src/../data/x` counts as data.
    pub fn classify(relative: &str) -> Option<Self> {
        let mut parts = Vec::new();
        for c in Path::new(relative).components() {
            match c {
                Component::Normal(s) => parts.push(s),
                Component::ParentDir => {
                    parts.pop();
                }
                _ => {}
            }
        }
        let first = parts.first()?.to_string_lossy();
        [Self::Data, Self::Plan, Self::Code, Self::Config, Self::Result]
            .into_iter()
            .find(|k| k.subpath() == first)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataCopyMode {
    /// Hard-link files, falling back to a full copy where linking fails.
    #[default]
    Hardlink,
    Copy,
}

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("task bundle invalid: {0}")]
    BundleInvalid(String),
    #[error("insufficient space: {0}")]
    InsufficientSpace(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("no such artifact: {0}")]
    NotFound(String),
    #[error("path escapes the repository: {0}")]
    PathEscape(String),
    #[error("repository {repo} lease not held by `{holder}`")]
    LeaseViolation { repo: usize, holder: String },
    #[error("data/ is read-only: {0}")]
    DataReadOnly(String),
    #[error("repository {repo} is {status:?}")]
    RepoInactive { repo: usize, status: RepoStatus },
    #[error("command is empty")]
    EmptyCommand,
    #[error("failed to spawn command: {0}")]
    SpawnFailure(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::StorageFull {
            WorkspaceError::InsufficientSpace(path.display().to_string())
        } else {
            WorkspaceError::Io { path: path.display().to_string(), source }
        }
    }
}

/// One isolated workspace.
#[derive(Debug)]
pub struct Repository {
    pub index: usize,
    root: PathBuf,
    status: Mutex<RepoStatus>,
    lease: Mutex<Option<String>>,
    verified: AtomicBool,
    smoke_millis: Mutex<Option<u64>>,
    exec_counter: AtomicU64,
    write_counter: AtomicU64,
}

impl Repository {
    /// Wraps an existing directory; the root is canonicalized.
    pub fn open(index: usize, root: impl AsRef<Path>) -> Result<Arc<Self>, WorkspaceError> {
        let root = root.as_ref();
        let root = fs::canonicalize(root).map_err(io_err(root))?;
        Ok(Arc::new(Self {
            index,
            root,
            status: Mutex::new(RepoStatus::Active),
            lease: Mutex::new(None),
            verified: AtomicBool::new(false),
            smoke_millis: Mutex::new(None),
            exec_counter: AtomicU64::new(0),
            write_counter: AtomicU64::new(0),
        }))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn status(&self) -> RepoStatus {
        *self.status.lock().unwrap()
    }

    pub fn set_status(&self, status: RepoStatus) {
        *self.status.lock().unwrap() = status;
    }

    pub fn lease_holder(&self) -> Option<String> {
        self.lease.lock().unwrap().clone()
    }

    /// Grants the single-writer lease to `holder`. Fails if anyone (including
    /// `holder`) already holds it.
    pub fn acquire_lease(self: &Arc<Self>, holder: &str) -> Result<LeaseGuard, WorkspaceError> {
        let mut lease = self.lease.lock().unwrap();
        if lease.is_some() {
            return Err(WorkspaceError::LeaseViolation { repo: self.index, holder: holder.into() });
        }
        *lease = Some(holder.to_string());
        Ok(LeaseGuard { repo: Arc::clone(self), holder: holder.to_string() })
    }

    fn check_lease(&self, holder: &str) -> Result<(), WorkspaceError> {
        match self.lease.lock().unwrap().as_deref() {
            Some(h) if h == holder => Ok(()),
            _ => Err(WorkspaceError::LeaseViolation { repo: self.index, holder: holder.into() }),
        }
    }

    fn check_active(&self) -> Result<(), WorkspaceError> {
        match self.status() {
            RepoStatus::Active => Ok(()),
            status => Err(WorkspaceError::RepoInactive { repo: self.index, status }),
        }
    }

    pub fn code_verified(&self) -> bool {
        self.verified.load(Ordering::SeqCst)
    }

    pub fn set_code_verified(&self, verified: bool) {
        self.verified.store(verified, Ordering::SeqCst);
    }

    /// Duration of the latest successful smoke run, in milliseconds.
    pub fn smoke_millis(&self) -> Option<u64> {
        *self.smoke_millis.lock().unwrap()
    }

    pub fn set_smoke_millis(&self, millis: u64) {
        *self.smoke_millis.lock().unwrap() = Some(millis);
    }

    pub(crate) fn next_exec_id(&self) -> u64 {
        self.exec_counter.fetch_add(1, Ordering::SeqCst) + 1
    }

    /// Resolves `relative` inside the root. Rejects absolute paths, `..`
    /// escapes and symlinks that lead outside the root.
    pub fn resolve(&self, relative: &str) -> Result<PathBuf, WorkspaceError> {
        let escape = || WorkspaceError::PathEscape(relative.to_string());
        let mut parts: Vec<&std::ffi::OsStr> = Vec::new();
        for comp in Path::new(relative).components() {
            match comp {
                Component::Normal(s) => parts.push(s),
                Component::CurDir => {}
                Component::ParentDir => {
                    parts.pop().ok_or_else(escape)?;
                }
                Component::RootDir | Component::Prefix(_) => return Err(escape()),
            }
        }
        let mut path = self.root.clone();
        for part in &parts {
            path.push(part);
            // Symlinks anywhere along the way must stay inside the root.
            if let Ok(meta) = fs::symlink_metadata(&path) {
                if meta.file_type().is_symlink() {
                    let target = fs::canonicalize(&path).map_err(|_| escape())?;
                    if !target.starts_with(&self.root) {
                        return Err(escape());
                    }
                }
            } else {
                break;
            }
        }
        let mut full = self.root.clone();
        full.extend(parts);
        Ok(full)
    }

    pub fn exists(&self, relative: &str) -> bool {
        self.resolve(relative).map(|p| p.exists()).unwrap_or(false)
    }

    /// Non-empty directory check, used for `src/` and `config/` postconditions.
    pub fn has_files_under(&self, relative: &str) -> bool {
        self.resolve(relative)
            .ok()
            .and_then(|p| fs::read_dir(p).ok())
            .is_some_and(|mut it| it.next().is_some())
    }
}

/// Releases the lease when dropped.
#[derive(Debug)]
pub struct LeaseGuard {
    repo: Arc<Repository>,
    holder: String,
}

impl LeaseGuard {
    pub fn holder(&self) -> &str {
        &self.holder
    }
}

impl Drop for LeaseGuard {
    fn drop(&mut self) {
        let mut lease = self.repo.lease.lock().unwrap();
        if lease.as_deref() == Some(self.holder.as_str()) {
            *lease = None;
        }
    }
}

/// The n candidate repositories plus the aggregator repository.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub repos: Vec<Arc<Repository>>,
}

impl Workspace {
    pub fn candidate_count(&self) -> usize {
        self.repos.len() - 1
    }

    /// Repository by 1-based index, including the aggregator repo n+1.
    pub fn repo(&self, index: usize) -> Option<&Arc<Repository>> {
        index.checked_sub(1).and_then(|i| self.repos.get(i))
    }

    pub fn candidates(&self) -> &[Arc<Repository>] {
        &self.repos[..self.repos.len() - 1]
    }

    pub fn aggregator_repo(&self) -> &Arc<Repository> {
        self.repos.last().expect("workspace has an aggregator repo")
    }
}

pub fn repos_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("repos")
}

/// Checks the task bundle layout.
pub fn validate_bundle(bundle: &Path) -> Result<(), WorkspaceError> {
    if !bundle.join("task.md").is_file() {
        return Err(WorkspaceError::BundleInvalid(format!("{} has no task.md", bundle.display())));
    }
    if !bundle.join("data").is_dir() {
        return Err(WorkspaceError::BundleInvalid(format!("{} has no data/ directory", bundle.display())));
    }
    Ok(())
}

/// Creates `n` candidate repositories, each with its own copy of the
/// bundle's `data/`, plus an empty aggregator repository.
pub fn init_repositories(
    run_dir: &Path,
    n: usize,
    bundle: &Path,
    copy_mode: DataCopyMode,
) -> Result<Workspace, WorkspaceError> {
    if n == 0 {
        return Err(WorkspaceError::BundleInvalid("n must be at least 1".into()));
    }
    validate_bundle(bundle)?;
    let base = repos_dir(run_dir);
    let mut repos = Vec::with_capacity(n + 1);
    for i in 1..=n + 1 {
        let root = base.join(format!("repo_{i}"));
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        if i <= n {
            copy_tree(&bundle.join("data"), &root.join("data"), copy_mode)?;
        } else {
            let meta = root.join("RUN");
            fs::write(&meta, format!("candidates = {n}\n")).map_err(io_err(&meta))?;
        }
        repos.push(Repository::open(i, &root)?);
    }
    Ok(Workspace { repos })
}

pub(crate) fn copy_tree(src: &Path, dst: &Path, mode: DataCopyMode) -> Result<(), WorkspaceError> {
    fs::create_dir_all(dst).map_err(io_err(dst))?;
    let mut entries: Vec<_> = fs::read_dir(src)
        .map_err(io_err(src))?
        .filter_map(Result::ok)
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let from = entry.path();
        let to = dst.join(entry.file_name());
        let ty = entry.file_type().map_err(io_err(&from))?;
        if ty.is_dir() {
            copy_tree(&from, &to, mode)?;
        } else {
            let linked = mode == DataCopyMode::Hardlink && fs::hard_link(&from, &to).is_ok();
            if !linked {
                fs::copy(&from, &to).map_err(io_err(&to))?;
            }
        }
    }
    Ok(())
}

/// Map from relative path to content digest for every file under `dir`.
pub fn tree_manifest(dir: &Path) -> BTreeMap<String, String> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for entry in entries.filter_map(Result::ok) {
            let path = entry.path();
            let Ok(ty) = entry.file_type() else { continue };
            if ty.is_dir() {
                walk(base, &path, out);
            } else if let Ok(bytes) = fs::read(&path) {
                let rel = path.strip_prefix(base).unwrap_or(&path);
                out.insert(rel.to_string_lossy().replace('\\', "/"), content_digest(bytes));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Single digest over a directory tree (paths and contents).
pub fn tree_digest(dir: &Path) -> String {
    let listing: String = tree_manifest(dir)
        .into_iter()
        .map(|(p, d)| format!("{p}\t{d}\n"))
        .collect();
    content_digest(listing)
}

/// Reads a file (or lists a directory). Binary files are summarized by size
/// and digest.
pub fn read_artifact(repo: &Repository, relative: &str) -> Result<String, WorkspaceError> {
    if repo.status() == RepoStatus::Failed {
        return Err(WorkspaceError::RepoInactive { repo: repo.index, status: RepoStatus::Failed });
    }
    let path = repo.resolve(relative)?;
    let meta = fs::metadata(&path).map_err(|_| WorkspaceError::NotFound(relative.to_string()))?;
    if meta.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&path)
            .map_err(io_err(&path))?
            .filter_map(Result::ok)
            .filter(|e| !e.file_name().to_string_lossy().starts_with(".tmp-"))
            .map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                if e.file_type().is_ok_and(|t| t.is_dir()) {
                    format!("{name}/")
                } else {
                    name
                }
            })
            .collect();
        names.sort();
        return Ok(names.join("\n"));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    match String::from_utf8(bytes) {
        Ok(text) if !text.contains('\0') => Ok(text),
        Ok(text) => Ok(binary_summary(text.as_bytes())),
        Err(e) => Ok(binary_summary(e.as_bytes())),
    }
}

fn binary_summary(bytes: &[u8]) -> String {
    format!("binary file: {} bytes, sha256 {}", bytes.len(), content_digest(bytes))
}

/// True when `path`, after following symlinks on its existing prefix, lies
/// under the repository's `data/`.
fn lands_in_data(root: &Path, path: &Path) -> bool {
    let Ok(data) = fs::canonicalize(root.join("data")) else { return false };
    let mut probe = path;
    loop {
        if let Ok(real) = fs::canonicalize(probe) {
            return real.starts_with(&data);
        }
        match probe.parent() {
            Some(p) => probe = p,
            None => return false,
        }
    }
}

/// Atomically creates or replaces a file. The caller must hold the lease.
pub fn write_artifact(
    repo: &Repository,
    holder: &str,
    relative: &str,
    content: impl AsRef<[u8]>,
) -> Result<(), WorkspaceError> {
    let path = repo.resolve(relative)?;
    repo.check_lease(holder)?;
    repo.check_active()?;
    if ArtifactKind::classify(relative) == Some(ArtifactKind::Data) || lands_in_data(&repo.root, &path) {
        return Err(WorkspaceError::DataReadOnly(relative.to_string()));
    }
    if path == repo.root {
        return Err(WorkspaceError::NotFound(relative.to_string()));
    }
    let parent = path.parent().expect("resolved path has a parent");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let n = repo.write_counter.fetch_add(1, Ordering::SeqCst);
    let tmp = parent.join(format!(".tmp-{}-{n}", std::process::id()));
    fs::write(&tmp, content.as_ref()).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(&path)(e)
    })
}
