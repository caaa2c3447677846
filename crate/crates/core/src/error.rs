use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid class list: {0}")]
    ClassList(String),

    #[error("patch {patch_id}: {reason}")]
    InvalidPatch { patch_id: String, reason: String },

    #[error("region {region_id}: {reason}")]
    InvalidRegion { region_id: String, reason: String },

    #[error("cannot split {regions} regions into {folds} folds")]
    TooFewRegions { regions: usize, folds: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("positive-negative ratio undefined: dataset has no negative samples")]
    NoNegatives,

    #[error("duplicate patch id {0}")]
    DuplicateId(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
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

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn stage(stage: impl Into<String>) -> impl FnOnce(Error) -> Error {
        let stage = stage.into();
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    pub(crate) fn patch(patch_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidPatch {
            patch_id: patch_id.into(),
            reason: reason.into(),
        }
    }
}
