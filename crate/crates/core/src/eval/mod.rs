//! Scoring free-text model responses against the action catalog.
//!
//! A response is mapped to the catalog action whose embedding has the
//! highest cosine similarity with the response embedding. Accuracy is the
//! exact-match rate of those mapped actions against the gold labels.

mod io;
mod matcher;
mod metrics;
mod table;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;

pub use io::{read_predictions, read_samples, write_reports};
pub use matcher::{cosine, match_action, ActionMatcher, EmbeddingCache};
pub use metrics::{
    bucketize, evaluate, evaluate_all, paired_outcomes, score, significance, significance_with,
    BootstrapConfig, EvalOptions,
};
pub use table::{format_percent, render_buckets, render_table};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("vectors have dimensions {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine of an all-zero vector is undefined")]
    ZeroVector,
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("line {line}: prediction references unknown sample id '{id}'")]
    UnknownSample { id: String, line: usize },
    #[error("line {line}: duplicate prediction for sample '{id}' ({context})")]
    DuplicatePrediction { id: String, line: usize, context: String },
    #[error("{context}: no prediction for sample '{id}'")]
    MissingPrediction { id: String, context: String },
    #[error("sample '{id}': gold action index {index} is outside the catalog (size {size})")]
    InvalidGold { id: String, index: usize, size: usize },
    #[error("outcome vectors have lengths {left} and {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("expected accuracies for {expected} labels, got {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl EvalError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.into(),
            source,
        }
    }
}

/// What the predicting model was shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    UtteranceOnly,
    UtterancePlusDescription,
}

impl Setting {
    pub const ALL: [Setting; 2] = [Setting::UtteranceOnly, Setting::UtterancePlusDescription];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::UtteranceOnly => "utterance_only",
            Setting::UtterancePlusDescription => "utterance_plus_description",
        }
    }

    /// Column-group heading in rendered tables.
    pub fn title(self) -> &'static str {
        match self {
            Setting::UtteranceOnly => "Utterance-Only",
            Setting::UtterancePlusDescription => "Description + Utterance",
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSample {
    pub id: String,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub gold_action_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub setting: Setting,
    pub response_text: String,
    /// Model or augmentation variant that produced the response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Rows sharing a group are compared with each other in tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// 1-based line in the predictions file, 0 when not read from a file.
    #[serde(skip)]
    pub line: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub correct: usize,
    pub total: usize,
    /// 0 for labels without samples.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub gold: usize,
    pub predicted: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub baseline: String,
    pub p_value: f64,
    pub significant: bool,
    pub resamples: usize,
    pub seed: u64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Label indices, ascending by (accuracy, index).
    pub members: Vec<usize>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub group: String,
    pub setting: Setting,
    pub encoder_id: String,
    pub n_samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_label: BTreeMap<usize, LabelStats>,
    pub significance: Option<Significance>,
    pub buckets: Option<Vec<Bucket>>,
    /// How response and action texts were prepared before embedding.
    pub text_normalization: String,
    /// Sorted by sample id.
    pub outcomes: Vec<SampleOutcome>,
}

/// Labels a report before scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMeta {
    pub system: String,
    pub group: String,
    pub setting: Setting,
    pub encoder_id: String,
}

pub const TEXT_NORMALIZATION: &str = "whitespace-collapsed";

/// Text as it is sent to the encoder.
pub fn normalize_for_embedding(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
