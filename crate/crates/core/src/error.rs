use std::path::PathBuf;

use crate::volume::ModalityId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("label value {value} is not a valid tumor code (expected 0, 1, 2 or 4)")]
    InvalidLabel { value: i32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },

    #[error("missing modality {modality} for subject `{subject}`")]
    MissingModality { subject: String, modality: ModalityId },

    #[error("missing file {path}")]
    MissingFile { path: PathBuf },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("zero variance over the nonzero voxels")]
    ZeroVariance,

    #[error("no patch window satisfied the foreground rule after {attempts} attempts")]
    NoValidWindow { attempts: usize },

    #[error("non-finite loss term `{term}`")]
    NonFinite { term: String },

    #[error("parameter transfer: {0}")]
    Transfer(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub(crate) fn layer(layer: &str, reason: impl Into<String>) -> Self {
        Error::Layer { layer: layer.to_string(), reason: reason.into() }
    }
}
