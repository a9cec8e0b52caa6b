use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("{op}: invalid attribute: {detail}")]
    Attr { op: &'static str, detail: String },

    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("node `{node}` has ambiguous channel semantics: {detail}")]
    AmbiguousChannels { node: String, detail: String },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("bottleneck: {0}")]
    Bottleneck(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt file at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-finite loss at iteration {iteration}: cross-entropy {ce}, flops loss {flops_loss}")]
    NonFiniteLoss {
        iteration: usize,
        ce: f64,
        flops_loss: f64,
    },

    #[error("training diverged at epoch {epoch}: loss {loss} vs initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Tags an error with the pipeline stage it came from.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
