//! Running the augmentation routes and assembling their output into an
//! instruction-tuning dataset.
//!
//! Output tree under the dataset root:
//!
//! ```text
//! images/<id>.png            generated image
//! images/<id>.png.meta.json  how it was generated
//! raw/<batch>.txt            chat output, verbatim
//! scenarios.jsonl            parsed scenarios that made it into the dataset
//! failures.jsonl             items that were dropped, and why
//! dedup.jsonl                records removed as exact duplicates
//! train.json                 conversation records for the fine-tuner
//! manifest.json              counts, digests, per-record image hashes
//! ```

mod builder;
mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;
use crate::prompt::{PromptError, PromptVariant, Route};

pub use builder::{
    assemble, build_dataset, load_manifest, merge_datasets, train_json_bytes, verify_dataset,
    write_dataset, Assembled, BuildMeta, Counts, DatasetManifest, DatasetRecord, DedupEntry, Turn,
    VerifyReport, IMAGE_TOKEN, MANIFEST_FILE, TRAIN_FILE,
};
pub use pipeline::{
    plan_requests, run_action_route, run_place_route, write_run_logs, Failure, GeneratedPair,
    RequestPlan, RouteOptions, RouteOutput, RunContext, UnitWarning,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no scenario/image pairs to build a dataset from")]
    Empty,
    #[error("duplicate record id '{0}'")]
    IdCollision(String),
    #[error("record {id}: image {path} does not exist")]
    MissingImage { id: String, path: PathBuf },
    #[error("record {id}: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid options: {0}")]
    Options(String),
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Key used for per-variant counts: `"<route>/<variant>"`.
pub fn variant_key(route: Route, variant: PromptVariant) -> String {
    format!("{}/{}", route, variant.as_str())
}
