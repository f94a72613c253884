use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StudyError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("unknown triplet `{0}`")]
    UnknownTriplet(String),
    #[error("invalid rater id `{0}`")]
    InvalidRater(String),
    #[error("choice must be 0 or 1, got {0}")]
    InvalidChoice(u8),
    #[error("invalid vote: {0}")]
    InvalidVote(String),
    #[error("permutation for {triplet_id} does not match the one presented to {rater_id}")]
    PermutationMismatch { triplet_id: String, rater_id: String },
    #[error("duplicate triplet id `{0}` in manifest")]
    DuplicateTriplet(String),
    #[error("vote log {path}:{line}: {message}")]
    LogCorrupt { path: PathBuf, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] nariqa_core::Error),
}

impl StudyError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StudyError::Io {
            path: path.into(),
            source,
        }
    }
}
