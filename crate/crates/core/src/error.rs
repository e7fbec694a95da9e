use std::path::PathBuf;

use spectra_numerics::NumericsError;
use thiserror::Error;

use crate::corpus::Violation;

pub type Result<T, E = SpectraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("dialog {dialog_id} turn {turn_index}: invalid alignment: {}", join(violations))]
    InvalidAlignment {
        dialog_id: String,
        turn_index: usize,
        violations: Vec<Violation>,
    },

    #[error("dialog {dialog_id} turn {turn_index}: {msg}")]
    InvalidTurn {
        dialog_id: String,
        turn_index: usize,
        msg: String,
    },

    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("text of {len} tokens exceeds the limit of {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("waveform of {len} samples is shorter than the receptive field of {min} samples")]
    WaveformTooShort { len: usize, min: usize },

    #[error("unsupported manifest version {found} (expected {expected})")]
    ManifestVersion { found: u32, expected: u32 },

    #[error("shard {path}: {msg}")]
    Shard { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

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
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl SpectraError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| SpectraError::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| SpectraError::Json { path, source }
    }
}
