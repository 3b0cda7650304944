use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Repository, WorkspaceError};

pub const DEFAULT_TAIL_CAP: usize = 16 * 1024;
const LOG_DIR: &str = "result/logs";

#[derive(Clone, Debug, PartialEq)]
pub struct ExecSettings {
    pub grace: Duration,
    pub tail_cap: usize,
    /// Prepended (with a separating space) to every command.
    pub activation_prefix: String,
}

impl Default for ExecSettings {
    fn default() -> Self {
        Self { grace: Duration::from_secs(10), tail_cap: DEFAULT_TAIL_CAP, activation_prefix: String::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub command: String,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub duration: f64,
    pub stdout_tail: String,
    pub stderr_tail: String,
    /// Repository-relative log paths.
    pub stdout_log: String,
    pub stderr_log: String,
}

impl ExecutionRecord {
    pub fn succeeded(&self) -> bool {
        self.exit_code == Some(0)
    }

    /// Observation text. Excludes the duration so that replayed contexts are
    /// byte-identical.
    pub fn render(&self) -> String {
        let status = match (self.timed_out, self.exit_code) {
            (true, _) => "timed out".to_string(),
            (false, Some(code)) => format!("exit code {code}"),
            (false, None) => "killed by signal".to_string(),
        };
        format!(
            "$ {}\n{status}\n--- stdout (tail) ---\n{}\n--- stderr (tail) ---\n{}",
            self.command, self.stdout_tail, self.stderr_tail
        )
    }
}

/// Runs `command` through `sh -c` in its own process group with the
/// repository root as working directory. On timeout the group gets SIGTERM,
/// then SIGKILL after `settings.grace`. Stragglers left behind by a command
/// that exited normally are killed as well.
pub fn exec_program(
    repo: &Repository,
    holder: &str,
    command: &str,
    timeout: Duration,
    env_overrides: &BTreeMap<String, String>,
    settings: &ExecSettings,
) -> Result<ExecutionRecord, WorkspaceError> {
    repo.check_lease(holder)?;
    repo.check_active()?;
    if command.trim().is_empty() {
        return Err(WorkspaceError::EmptyCommand);
    }
    let id = repo.next_exec_id();
    let log_dir = repo.root().join(LOG_DIR);
    fs::create_dir_all(&log_dir).map_err(|source| WorkspaceError::Io {
        path: log_dir.display().to_string(),
        source,
    })?;
    let stdout_log = format!("{LOG_DIR}/exec-{id:04}.stdout");
    let stderr_log = format!("{LOG_DIR}/exec-{id:04}.stderr");
    let open = |rel: &str| {
        let path = repo.root().join(rel);
        File::create(&path).map_err(|source| WorkspaceError::Io { path: path.display().to_string(), source })
    };
    let (out, err) = (open(&stdout_log)?, open(&stderr_log)?);

    let full = if settings.activation_prefix.trim().is_empty() {
        command.to_string()
    } else {
        format!("{} {command}", settings.activation_prefix.trim())
    };
    let started = Instant::now();
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&full)
        .current_dir(repo.root())
        .envs(env_overrides)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0)
        .spawn()
        .map_err(|e| WorkspaceError::SpawnFailure(e.to_string()))?;
    let pgid = child.id() as i32;

    let mut timed_out = false;
    let mut status = None;
    let mut sleep = Duration::from_millis(2);
    while status.is_none() {
        match child.try_wait() {
            Ok(Some(s)) => status = Some(s),
            Ok(None) if started.elapsed() >= timeout => {
                timed_out = true;
                signal_group(pgid, libc::SIGTERM);
                let grace_end = Instant::now() + settings.grace;
                while Instant::now() < grace_end {
                    if let Ok(Some(s)) = child.try_wait() {
                        status = Some(s);
                        break;
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                signal_group(pgid, libc::SIGKILL);
                if status.is_none() {
                    status = child.wait().ok();
                }
                break;
            }
            Ok(None) => {
                std::thread::sleep(sleep);
                sleep = (sleep * 2).min(Duration::from_millis(25));
            }
            Err(e) => return Err(WorkspaceError::SpawnFailure(e.to_string())),
        }
    }
    signal_group(pgid, libc::SIGKILL);
    reap_group(pgid, Duration::from_millis(500));
    let duration = started.elapsed().as_secs_f64();

    Ok(ExecutionRecord {
        command: command.to_string(),
        exit_code: if timed_out { None } else { status.and_then(|s| s.code()) },
        timed_out,
        duration,
        stdout_tail: tail(&repo.root().join(&stdout_log), settings.tail_cap),
        stderr_tail: tail(&repo.root().join(&stderr_log), settings.tail_cap),
        stdout_log,
        stderr_log,
    })
}

fn signal_group(pgid: i32, signal: i32) {
    // SAFETY: killpg has no memory-safety preconditions; ESRCH is expected
    // once the group is gone.
    unsafe {
        libc::killpg(pgid, signal);
    }
}

/// Waits until no member of the group is left running. A SIGKILL is
/// delivered asynchronously, so orphans can linger for a moment after it.
/// Zombies awaiting their reaper count as gone.
fn reap_group(pgid: i32, limit: Duration) {
    let end = Instant::now() + limit;
    while Instant::now() < end && group_has_live_member(pgid) {
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn group_has_live_member(pgid: i32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    if unsafe { libc::killpg(pgid, 0) } != 0 {
        return false;
    }
    let Ok(entries) = fs::read_dir("/proc") else { return false };
    entries.filter_map(Result::ok).any(|e| {
        let Ok(stat) = fs::read_to_string(e.path().join("stat")) else { return false };
        // Fields after the parenthesized command: state, ppid, pgrp.
        let Some(rest) = stat.rfind(')').map(|i| &stat[i + 1..]) else { return false };
        let mut f = rest.split_whitespace();
        let state = f.next();
        let pgrp = f.nth(1).and_then(|v| v.parse::<i32>().ok());
        pgrp == Some(pgid) && state != Some("Z") && state != Some("X")
    })
}

fn tail(path: &Path, cap: usize) -> String {
    let Ok(mut f) = File::open(path) else { return String::new() };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let start = len.saturating_sub(cap as u64);
    if f.seek(SeekFrom::Start(start)).is_err() {
        return String::new();
    }
    let mut buf = Vec::with_capacity((len - start) as usize);
    let _ = f.read_to_end(&mut buf);
    // Drop a partial UTF-8 sequence at the cut.
    let skip = if start > 0 { buf.iter().take(3).take_while(|b| (**b & 0xC0) == 0x80).count() } else { 0 };
    String::from_utf8_lossy(&buf[skip..]).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn repo() -> (tempfile::TempDir, Arc<Repository>) {
        let dir = tempfile::tempdir().unwrap();
        let repo = Repository::open(1, dir.path()).unwrap();
        (dir, repo)
    }

    fn run(repo: &Repository, cmd: &str, timeout: f64, grace: f64) -> ExecutionRecord {
        let settings = ExecSettings { grace: Duration::from_secs_f64(grace), ..Default::default() };
        exec_program(repo, "h", cmd, Duration::from_secs_f64(timeout), &BTreeMap::new(), &settings).unwrap()
    }

    fn alive_with(marker: &str) -> bool {
        fs::read_dir("/proc").unwrap().filter_map(Result::ok).any(|e| {
            fs::read(e.path().join("cmdline"))
                .map(|c| String::from_utf8_lossy(&c).contains(marker))
                .unwrap_or(false)
        })
    }

    #[test]
    fn success_and_failure_are_recorded() {
        let (_d, repo) = repo();
        let _lease = repo.acquire_lease("h").unwrap();
        let ok = run(&repo, "echo OK", 10.0, 1.0);
        assert_eq!(ok.exit_code, Some(0));
        assert!(!ok.timed_out);
        assert!(ok.stdout_tail.contains("OK"));
        assert!(repo.root().join(&ok.stdout_log).exists());
        let bad = run(&repo, "echo boom >&2; exit 3", 10.0, 1.0);
        assert_eq!(bad.exit_code, Some(3));
        assert!(bad.stderr_tail.contains("boom"));
    }

    #[test]
    fn timeout_kills_the_process_group() {
        let (_d, repo) = repo();
        let _lease = repo.acquire_lease("h").unwrap();
        let rec = run(&repo, "sleep 60.0417 & sleep 60.0417; wait", 1.0, 2.0);
        assert!(rec.timed_out);
        assert_eq!(rec.exit_code, None);
        assert!(rec.duration < 4.0, "{}", rec.duration);
        assert!(!alive_with("60.0417"));
    }

    #[test]
    fn term_ignoring_child_is_killed_after_grace() {
        let (_d, repo) = repo();
        let _lease = repo.acquire_lease("h").unwrap();
        let rec = run(&repo, "trap '' TERM; sleep 60.0531", 0.3, 0.5);
        assert!(rec.timed_out);
        assert!(rec.duration >= 0.7 && rec.duration < 3.0, "{}", rec.duration);
        assert!(!alive_with("60.0531"));
    }

    #[test]
    fn background_stragglers_are_reaped() {
        let (_d, repo) = repo();
        let _lease = repo.acquire_lease("h").unwrap();
        let rec = run(&repo, "sleep 60.0619 & echo started", 10.0, 1.0);
        assert_eq!(rec.exit_code, Some(0));
        std::thread::sleep(Duration::from_millis(50));
        assert!(!alive_with("60.0619"));
    }

    #[test]
    fn requires_lease_and_command() {
        let (_d, repo) = repo();
        let settings = ExecSettings::default();
        let none = BTreeMap::new();
        assert!(matches!(
            exec_program(&repo, "h", "true", Duration::from_secs(1), &none, &settings),
            Err(WorkspaceError::LeaseViolation { .. })
        ));
        let _lease = repo.acquire_lease("h").unwrap();
        assert!(matches!(
            exec_program(&repo, "h", "  ", Duration::from_secs(1), &none, &settings),
            Err(WorkspaceError::EmptyCommand)
        ));
    }

    #[test]
    fn tails_are_capped_and_env_applies() {
        let (_d, repo) = repo();
        let _lease = repo.acquire_lease("h").unwrap();
        let mut env = BTreeMap::new();
        env.insert("GREETING".to_string(), "hi-there".to_string());
        let settings = ExecSettings { tail_cap: 100, activation_prefix: "GREETING2=x".into(), ..Default::default() };
        let rec = exec_program(&repo, "h", "echo $GREETING $GREETING2; head -c 5000 /dev/zero | tr '\\0' a", Duration::from_secs(5), &env, &settings).unwrap();
        assert!(rec.stdout_tail.len() <= 100);
        let full = fs::read_to_string(repo.root().join(&rec.stdout_log)).unwrap();
        assert!(full.starts_with("hi-there"));
    }
}
