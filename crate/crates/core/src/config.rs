//! Run configuration: flat `key = value` text with dotted keys.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::provider::ProviderMode;
use crate::workspace::DataCopyMode;

#[derive(Clone, Debug, PartialEq)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub endpoint: String,
    pub model_id: String,
    pub temperature: f64,
    pub fixture_path: Option<PathBuf>,
    /// Name of the environment variable holding the credential.
    pub credential_env: String,
    pub max_output_tokens: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    None,
    Fixture,
    Live,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub mode: SearchMode,
    pub fixture_path: Option<PathBuf>,
    pub endpoint: String,
    pub max_results: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetConfig {
    pub total_seconds: f64,
    pub grace_seconds: f64,
    pub aggregator_reserve_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Limits {
    pub agent_steps_manager: u32,
    pub agent_steps_subagent: u32,
    pub debug_attempts: u32,
    pub observation_cap: usize,
    pub parallelism: usize,
    pub smoke_timeout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub run_dir: PathBuf,
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub provider: ProviderConfig,
    pub repos_n: usize,
    pub budget: BudgetConfig,
    pub limits: Limits,
    pub paths: Paths,
    pub search: SearchConfig,
    pub data_copy: DataCopyMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            provider: ProviderConfig {
                mode: ProviderMode::Scripted,
                endpoint: "http://localhost:8000/v1".into(),
                model_id: "default".into(),
                temperature: 1.0,
                fixture_path: None,
                credential_env: "MODELSMITH_API_KEY".into(),
                max_output_tokens: 8192,
            },
            repos_n: 7,
            budget: BudgetConfig {
                total_seconds: 86_400.0,
                grace_seconds: 10.0,
                aggregator_reserve_seconds: 900.0,
            },
            limits: Limits {
                agent_steps_manager: 200,
                agent_steps_subagent: 40,
                debug_attempts: 6,
                observation_cap: 16_384,
                parallelism: 4,
                smoke_timeout: 120.0,
            },
            paths: Paths { run_dir: PathBuf::from("run"), prompts_dir: None },
            search: SearchConfig {
                mode: SearchMode::None,
                fixture_path: None,
                endpoint: String::new(),
                max_results: crate::workspace::DEFAULT_MAX_RESULTS,
            },
            data_copy: DataCopyMode::Hardlink,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(String),
    #[error("config invalid at `{key}`: {detail}")]
    ConfigInvalid { key: String, detail: String },
}

fn invalid(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::ConfigInvalid { key: key.into(), detail: detail.into() }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| invalid(key, format!("cannot parse `{value}`")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Parses config text. Unset keys keep their defaults; relative paths are
    /// left as written.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(&format!("line {}", i + 1), "expected `key = value`"))?;
            let key = key.trim();
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            match key {
                "provider.mode" => {
                    c.provider.mode = match value {
                        "live" => ProviderMode::Live,
                        "scripted" => ProviderMode::Scripted,
                        _ => return Err(invalid(key, "expected live|scripted")),
                    }
                }
                "provider.endpoint" => c.provider.endpoint = value.to_string(),
                "provider.model_id" => c.provider.model_id = value.to_string(),
                "provider.temperature" => c.provider.temperature = num(key, value)?,
                "provider.fixture_path" => c.provider.fixture_path = opt_path(value),
                "provider.credential_env" => c.provider.credential_env = value.to_string(),
                "provider.max_output_tokens" => c.provider.max_output_tokens = num(key, value)?,
                "repos_n" => c.repos_n = num(key, value)?,
                "budget.total_seconds" => c.budget.total_seconds = num(key, value)?,
                "budget.grace_seconds" => c.budget.grace_seconds = num(key, value)?,
                "budget.aggregator_reserve_seconds" => c.budget.aggregator_reserve_seconds = num(key, value)?,
                "limits.agent_steps_manager" => c.limits.agent_steps_manager = num(key, value)?,
                "limits.agent_steps_subagent" => c.limits.agent_steps_subagent = num(key, value)?,
                "limits.debug_attempts" => c.limits.debug_attempts = num(key, value)?,
                "limits.observation_cap" => c.limits.observation_cap = num(key, value)?,
                "limits.parallelism" => c.limits.parallelism = num(key, value)?,
                "limits.smoke_timeout" => c.limits.smoke_timeout = num(key, value)?,
                "paths.run_dir" => c.paths.run_dir = PathBuf::from(value),
                "paths.prompts_dir" => c.paths.prompts_dir = opt_path(value),
                "search.mode" => {
                    c.search.mode = match value {
                        "none" => SearchMode::None,
                        "fixture" => SearchMode::Fixture,
                        "live" => SearchMode::Live,
                        _ => return Err(invalid(key, "expected none|fixture|live")),
                    }
                }
                "search.fixture_path" => c.search.fixture_path = opt_path(value),
                "search.endpoint" => c.search.endpoint = value.to_string(),
                "search.max_results" => c.search.max_results = num(key, value)?,
                "workspace.data_copy" => {
                    c.data_copy = match value {
                        "hardlink" => DataCopyMode::Hardlink,
                        "copy" => DataCopyMode::Copy,
                        _ => return Err(invalid(key, "expected hardlink|copy")),
                    }
                }
                other => return Err(invalid(other, "unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.repos_n < 1 {
            return Err(invalid("repos_n", "must be at least 1"));
        }
        if !(self.provider.temperature >= 0.0) {
            return Err(invalid("provider.temperature", "must be >= 0"));
        }
        if self.provider.max_output_tokens == 0 {
            return Err(invalid("provider.max_output_tokens", "must be positive"));
        }
        let b = &self.budget;
        for (key, v) in [
            ("budget.total_seconds", b.total_seconds),
            ("budget.grace_seconds", b.grace_seconds),
            ("budget.aggregator_reserve_seconds", b.aggregator_reserve_seconds),
            ("limits.smoke_timeout", self.limits.smoke_timeout),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, "must be a finite non-negative number"));
            }
        }
        if b.total_seconds <= b.aggregator_reserve_seconds {
            return Err(invalid("budget.total_seconds", "must exceed budget.aggregator_reserve_seconds"));
        }
        let l = &self.limits;
        if l.agent_steps_manager == 0 {
            return Err(invalid("limits.agent_steps_manager", "must be at least 1"));
        }
        if l.agent_steps_subagent == 0 {
            return Err(invalid("limits.agent_steps_subagent", "must be at least 1"));
        }
        if l.debug_attempts == 0 {
            return Err(invalid("limits.debug_attempts", "must be at least 1"));
        }
        if l.observation_cap < 64 {
            return Err(invalid("limits.observation_cap", "must be at least 64"));
        }
        if l.parallelism == 0 {
            return Err(invalid("limits.parallelism", "must be at least 1"));
        }
        if self.search.max_results == 0 {
            return Err(invalid("search.max_results", "must be at least 1"));
        }
        Ok(())
    }

    /// Makes relative paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.run_dir);
        for p in [&mut self.provider.fixture_path, &mut self.paths.prompts_dir, &mut self.search.fixture_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let p = &self.provider;
        let mode = match p.mode {
            ProviderMode::Live => "live",
            ProviderMode::Scripted => "scripted",
        };
        let _ = writeln!(s, "provider.mode = {mode}");
        let _ = writeln!(s, "provider.endpoint = {}", p.endpoint);
        let _ = writeln!(s, "provider.model_id = {}", p.model_id);
        let _ = writeln!(s, "provider.temperature = {}", p.temperature);
        let _ = writeln!(s, "provider.fixture_path = {}", path(&p.fixture_path));
        let _ = writeln!(s, "provider.credential_env = {}", p.credential_env);
        let _ = writeln!(s, "provider.max_output_tokens = {}", p.max_output_tokens);
        let _ = writeln!(s, "repos_n = {}", self.repos_n);
        let _ = writeln!(s, "budget.total_seconds = {}", self.budget.total_seconds);
        let _ = writeln!(s, "budget.grace_seconds = {}", self.budget.grace_seconds);
        let _ = writeln!(s, "budget.aggregator_reserve_seconds = {}", self.budget.aggregator_reserve_seconds);
        let l = &self.limits;
        let _ = writeln!(s, "limits.agent_steps_manager = {}", l.agent_steps_manager);
        let _ = writeln!(s, "limits.agent_steps_subagent = {}", l.agent_steps_subagent);
        let _ = writeln!(s, "limits.debug_attempts = {}", l.debug_attempts);
        let _ = writeln!(s, "limits.observation_cap = {}", l.observation_cap);
        let _ = writeln!(s, "limits.parallelism = {}", l.parallelism);
        let _ = writeln!(s, "limits.smoke_timeout = {}", l.smoke_timeout);
        let _ = writeln!(s, "paths.run_dir = {}", self.paths.run_dir.display());
        let _ = writeln!(s, "paths.prompts_dir = {}", path(&self.paths.prompts_dir));
        let search_mode = match self.search.mode {
            SearchMode::None => "none",
            SearchMode::Fixture => "fixture",
            SearchMode::Live => "live",
        };
        let _ = writeln!(s, "search.mode = {search_mode}");
        let _ = writeln!(s, "search.fixture_path = {}", path(&self.search.fixture_path));
        let _ = writeln!(s, "search.endpoint = {}", self.search.endpoint);
        let _ = writeln!(s, "search.max_results = {}", self.search.max_results);
        let copy = match self.data_copy {
            DataCopyMode::Hardlink => "hardlink",
            DataCopyMode::Copy => "copy",
        };
        let _ = writeln!(s, "workspace.data_copy = {copy}");
        f.write_str(&s)
    }
}

/// Reads and validates a config file; relative paths resolve against the
/// file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| ConfigError::NotFound(path.display().to_string()))?;
    let mut config = RunConfig::parse(&text)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    config.resolve_paths(&base);
    Ok(config)
}
