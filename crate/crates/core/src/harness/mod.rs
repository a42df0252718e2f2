//! End-to-end experiment harness: a scripted origin, the controller, the
//! proxy's decision path and the caches wired over the simulated fabric.

mod content;
mod report;
mod run;
mod scenario;

use thiserror::Error;

pub use content::{
    file_bytes, generate_files, sha256_hex, ContentSet, FileDigest, OriginHandle, ScriptedOrigin,
};
pub use report::{
    emit_report, Aggregates, ConfigEcho, Report, RequestRecord, ServedBy, CSV_HEADER,
};
pub use run::{run_scenario, run_scenario_with, RunOptions, RunOutput};
pub use scenario::{
    default_manifest, FileSpec, RequestSpec, Roles, Scenario, ScenarioConfig, TopologyRef,
    DEFAULT_FILE_COUNT, DEFAULT_MAX_SIZE, DEFAULT_MIN_SIZE,
};

use crate::cache::CacheError;
use crate::controller::ControllerError;
use crate::fabric::FabricError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("request {index} ({file}): {leg} failed: {detail}")]
    Undelivered {
        index: usize,
        file: String,
        leg: String,
        detail: String,
    },
    #[error("request {index} ({file}): expected sha256 {expected}, got {got}")]
    DigestMismatch {
        index: usize,
        file: String,
        expected: String,
        got: String,
    },
}
