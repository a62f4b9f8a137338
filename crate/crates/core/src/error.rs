use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// configuration problems versus problems with the data being processed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed record in {path} line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate triplet_id {id:?}{context}")]
    DuplicateId { id: String, context: String },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("image of {width}x{height} is smaller than the {min}x{min} SSIM window")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing upstream {stage} output: {detail}")]
    MissingStage { stage: String, detail: String },

    #[error("perceptual backend failure: {0}")]
    Backend(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by configuration rather than by the data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::MissingStage { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
