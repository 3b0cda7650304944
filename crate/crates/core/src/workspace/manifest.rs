use std::fmt;
use std::fs;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Repository;

pub const MANIFEST_PATH: &str = "result/manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "higher" => Some(Self::HigherBetter),
            "lower" => Some(Self::LowerBetter),
            _ => None,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Self::HigherBetter => "higher",
            Self::LowerBetter => "lower",
        }
    }

    pub fn arrow(self) -> char {
        match self {
            Self::HigherBetter => '↑',
            Self::LowerBetter => '↓',
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Self::HigherBetter => a > b,
            Self::LowerBetter => a < b,
        }
    }
}

/// Machine-readable result record written by generated training code to
/// `result/manifest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub metric_name: String,
    pub metric_value: f64,
    pub direction: Direction,
    pub checkpoints: Vec<String>,
    pub predictions_path: Option<String>,
    pub produced_by: String,
    /// Seconds since run start, when the producer reports it.
    pub produced_at: Option<f64>,
    pub runs_completed: u32,
    /// Command (run from the repository root) that regenerates predictions.
    pub inference_command: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("no manifest")]
    NoManifest,
    #[error("manifest invalid at `{field}`: {detail}")]
    ManifestInvalid { field: String, detail: String },
}

fn invalid(field: &str, detail: impl Into<String>) -> ManifestError {
    ManifestError::ManifestInvalid { field: field.into(), detail: detail.into() }
}

impl ResultManifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut metric_name = None;
        let mut metric_value = None;
        let mut direction = None;
        let mut checkpoints = Vec::new();
        let mut predictions_path = None;
        let mut produced_by = String::new();
        let mut produced_at = None;
        let mut runs_completed = 0;
        let mut inference_command = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(&format!("line {}", i + 1), "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "metric_name" if !value.is_empty() => metric_name = Some(value.to_string()),
                "metric_name" => return Err(invalid(key, "empty")),
                "metric_value" => {
                    let v: f64 = value.parse().map_err(|_| invalid(key, format!("not a number: {value}")))?;
                    if !v.is_finite() {
                        return Err(invalid(key, "must be finite"));
                    }
                    metric_value = Some(v);
                }
                "direction" => {
                    direction = Some(Direction::parse(value).ok_or_else(|| invalid(key, "expected higher|lower"))?)
                }
                "checkpoints" => {
                    checkpoints = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "predictions_path" if !value.is_empty() => predictions_path = Some(value.to_string()),
                "predictions_path" => {}
                "produced_by" => produced_by = value.to_string(),
                "produced_at" => {
                    let v: f64 = value.parse().map_err(|_| invalid(key, "not a number"))?;
                    produced_at = Some(v);
                }
                "runs_completed" => {
                    runs_completed = value.parse().map_err(|_| invalid(key, "not a non-negative integer"))?
                }
                "inference_command" if !value.is_empty() => inference_command = Some(value.to_string()),
                "inference_command" => {}
                other => return Err(invalid(other, "unknown key")),
            }
        }
        Ok(Self {
            metric_name: metric_name.ok_or_else(|| invalid("metric_name", "missing"))?,
            metric_value: metric_value.ok_or_else(|| invalid("metric_value", "missing"))?,
            direction: direction.ok_or_else(|| invalid("direction", "missing"))?,
            checkpoints,
            predictions_path,
            produced_by,
            produced_at,
            runs_completed,
            inference_command,
        })
    }

    /// Checks that every listed path exists inside the repository.
    pub fn validate_paths(&self, repo: &Repository) -> Result<(), ManifestError> {
        for cp in &self.checkpoints {
            if !repo.exists(cp) {
                return Err(invalid("checkpoints", format!("{cp} does not exist in the repository")));
            }
        }
        if let Some(p) = &self.predictions_path {
            if !repo.exists(p) {
                return Err(invalid("predictions_path", format!("{p} does not exist in the repository")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ResultManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric_name = {}", self.metric_name)?;
        writeln!(f, "metric_value = {}", self.metric_value)?;
        writeln!(f, "direction = {}", self.direction.keyword())?;
        writeln!(f, "checkpoints = {}", self.checkpoints.join(","))?;
        if let Some(p) = &self.predictions_path {
            writeln!(f, "predictions_path = {p}")?;
        }
        writeln!(f, "produced_by = {}", self.produced_by)?;
        if let Some(t) = self.produced_at {
            writeln!(f, "produced_at = {t}")?;
        }
        writeln!(f, "runs_completed = {}", self.runs_completed)?;
        if let Some(c) = &self.inference_command {
            writeln!(f, "inference_command = {c}")?;
        }
        Ok(())
    }
}

pub fn read_manifest(repo: &Repository) -> Result<ResultManifest, ManifestError> {
    let path = repo.resolve(MANIFEST_PATH).map_err(|_| ManifestError::NoManifest)?;
    let text = fs::read_to_string(path).map_err(|_| ManifestError::NoManifest)?;
    let manifest = ResultManifest::parse(&text)?;
    manifest.validate_paths(repo)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_example_and_rejects_nan() {
        let m = ResultManifest::parse("metric_name = auc\nmetric_value = 0.91\ndirection = higher\nruns_completed = 2\n").unwrap();
        assert_eq!(m.metric_name, "auc");
        assert_eq!(m.metric_value, 0.91);
        assert_eq!(m.direction, Direction::HigherBetter);
        assert_eq!(m.runs_completed, 2);
        let err = ResultManifest::parse("metric_name = auc\nmetric_value = NaN\ndirection = higher\n").unwrap_err();
        assert_eq!(err, invalid("metric_value", "must be finite"));
        assert!(matches!(
            ResultManifest::parse("metric_name = auc\nmetric_value = 1\ndirection = sideways\n"),
            Err(ManifestError::ManifestInvalid { field, .. }) if field == "direction"
        ));
    }

    #[test]
    fn fresh_repo_has_no_manifest_and_paths_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let repo = Repository::open(1, dir.path()).unwrap();
        assert_eq!(read_manifest(&repo), Err(ManifestError::NoManifest));
        fs::create_dir_all(dir.path().join("result")).unwrap();
        fs::write(
            dir.path().join(MANIFEST_PATH),
            "metric_name = rmse\nmetric_value = 4.8\ndirection = lower\npredictions_path = result/preds.csv\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&repo), Err(ManifestError::ManifestInvalid { field, .. }) if field == "predictions_path"));
        fs::write(dir.path().join("result/preds.csv"), "id,score\n").unwrap();
        assert_eq!(read_manifest(&repo).unwrap().metric_value, 4.8);
    }

    proptest! {
        #[test]
        fn display_round_trips(
            name in "[a-z_]{1,12}",
            value in -1e6f64..1e6,
            higher in any::<bool>(),
            cps in proptest::collection::vec("[a-z/]{1,10}\\.pt", 0..3),
            runs in 0u32..100,
        ) {
            let m = ResultManifest {
                metric_name: name,
                metric_value: value,
                direction: if higher { Direction::HigherBetter } else { Direction::LowerBetter },
                checkpoints: cps,
                predictions_path: Some("result/p.csv".into()),
                produced_by: "tuner_1".into(),
                produced_at: None,
                runs_completed: runs,
                inference_command: Some("python3 src/predict.py".into()),
            };
            prop_assert_eq!(ResultManifest::parse(&m.to_string()).unwrap(), m);
        }
    }
}
