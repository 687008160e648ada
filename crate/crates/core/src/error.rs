use thiserror::Error;

use crate::model::AdId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no candidate ads to rank")]
    EmptyCandidates,

    #[error("store is empty")]
    EmptyStore,

    /// Retryable failure talking to a remote provider.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("ad {ad_id}: every label is {label}, need both clicks and non-clicks")]
    DegenerateLabels { ad_id: AdId, label: u8 },

    #[error("ad {ad_id}: training diverged at epoch {epoch} (loss {loss}); try a lower learning rate")]
    Divergence { ad_id: AdId, epoch: usize, loss: f64 },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("generation failed for ad {ad_id} on batch {batch:?} after {} attempts", transcripts.len())]
    GenerationFailed {
        ad_id: AdId,
        batch: Vec<String>,
        transcripts: Vec<String>,
    },

    #[error("degenerate weights for ad {0}: L2 norm is (near) zero")]
    DegenerateWeights(AdId),

    #[error("calibration reference error: {0}")]
    CalibrationReference(String),

    #[error("target mean probability {alpha} is unreachable; achievable interval is ({low}, {high})")]
    UnreachableTarget { alpha: f64, low: f64, high: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("weight cache has no snapshot loaded")]
    NotReady,

    #[error("snapshot rejected: {0}")]
    SnapshotRejected(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures worth retrying against a remote provider.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
