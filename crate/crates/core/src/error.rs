use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("state error: {0}")]
    State(String),
    #[error("training diverged at {stage} {index}: {detail}{}", last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Divergence {
        stage: &'static str,
        index: usize,
        detail: String,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("augmentation rejected: {0}")]
    AugmentationRejected(String),
    #[error("pore phase does not percolate along any axis")]
    NonPercolating,
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("missing prerequisite {artifact}: run `{stage}` first")]
    MissingPrerequisite { stage: String, artifact: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 divergence, 3 missing prerequisite.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 2,
            Error::MissingPrerequisite { .. } => 3,
            _ => 1,
        }
    }
}

impl From<poregan_nn::NnError> for Error {
    fn from(e: poregan_nn::NnError) -> Self {
        Error::Checkpoint(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
