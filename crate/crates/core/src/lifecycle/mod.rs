pub mod aggregator;
pub mod ensemble;
pub mod setup;

use std::fs::OpenOptions;
use std::io::ErrorKind;
use std::path::Path;

pub use aggregator::{blend_sources, run_aggregator, AggregationDecision, BlendMethod, FinalSubmission};
pub use setup::{run_setup, SetupPlan, SetupReport, SetupStatus};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LifecycleError {
    #[error("{0} already ran in this run directory")]
    AlreadyRan(&'static str),
    #[error("no valid candidates for aggregation")]
    NoValidCandidates,
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Error(String),
}

/// Creates `marker` in `run_dir`, failing if it already exists.
pub(crate) fn claim_once(run_dir: &Path, marker: &str, what: &'static str) -> Result<(), LifecycleError> {
    match OpenOptions::new().write(true).create_new(true).open(run_dir.join(marker)) {
        Ok(_) => Ok(()),
        Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(LifecycleError::AlreadyRan(what)),
        Err(e) => Err(LifecycleError::Io(e.to_string())),
    }
}
