use std::path::PathBuf;

use crate::FeatureId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("unknown document id `{0}`")]
    UnknownDocument(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data fingerprint mismatch: estimates {estimates}, bootstrap run {run}")]
    FingerprintMismatch { estimates: String, run: String },

    #[error("k = {k} exceeds the number of testable features ({testable})")]
    KTooLarge { k: usize, testable: usize },

    #[error("feature {0} never activates in the exemplar pool")]
    DeadFeature(FeatureId),

    #[error("llm backend error: {0}")]
    Backend(String),

    #[error("no usable description for feature {feature} after {attempts} attempts; raw outputs: {raw:?}")]
    DescriptionUnparsable {
        feature: FeatureId,
        attempts: usize,
        raw: Vec<String>,
    },

    #[error("monte carlo replication {rep} failed: {source}")]
    Replication {
        rep: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}
