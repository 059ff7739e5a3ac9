use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("proposal {row} has zero norm; cosine similarity is undefined")]
    ZeroNormRow { row: usize },

    #[error("ridged Gram matrix is not positive definite (pivot {pivot} = {value:e})")]
    SingularGram { pivot: usize, value: f64 },

    #[error("loss evaluated to a non-finite value: {0}")]
    NonFiniteLoss(String),

    #[error("cannot keep top-{b} proposals of a bag with {k}")]
    BadTruncation { b: usize, k: usize },

    #[error("anchor {anchor} has no differently-labelled candidate")]
    NoNegativeAvailable { anchor: usize },

    #[error("could not draw a batch with two distinct labels after {retries} retries")]
    InsufficientDiversity { retries: usize },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("query {query} has no relevant gallery item")]
    NoRelevantItems { query: usize },

    #[error("label {label} out of range for {categories} categories")]
    LabelOutOfRange { label: usize, categories: usize },

    #[error("{}: {message} (offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
