use std::path::PathBuf;

use crate::tensor_io::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {kind}")]
    Format {
        path: PathBuf,
        #[source]
        kind: FormatError,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no unused time index left for initialization")]
    Exhausted,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("unstable filter: {0}")]
    UnstableFilter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
