//! One error type for the whole crate.

use std::path::Path;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty audio")]
    EmptyAudio,
    #[error("corrupt audio: {0}")]
    CorruptAudio(String),
    #[error("audio too short: {got} samples, need at least {need}")]
    AudioTooShort { got: usize, need: usize },
    #[error("empty clip")]
    EmptyClip,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("subsample too small: {percent}% of {videos} videos rounds to zero")]
    SubsampleTooSmall { percent: f64, videos: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric fault: {0}")]
    Numeric(String),
    #[error("not a checkpoint: bad magic")]
    NotACheckpoint,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: String, detail: String },
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a path to an io error so CLI messages name the file.
    pub fn file(path: &Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn corrupt_file(path: &Path, detail: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }
}
