use std::path::PathBuf;

/// Every failure the pipeline can surface.
///
/// The variant is the machine-readable category; see [`Error::category`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate vector in {op}: norm {norm:e} is below the normalization floor")]
    Degenerate { op: &'static str, norm: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("insufficient batch: {0}")]
    InsufficientBatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: u64, reason: String },

    #[error("mixture fit failed: {0}")]
    Fit(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable tag used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Degenerate { .. } => "degenerate",
            Error::NonFinite { .. } => "non-finite",
            Error::Contract(_) => "contract",
            Error::InsufficientBatch(_) => "insufficient-batch",
            Error::Config(_) => "config",
            Error::Ingestion { .. } => "ingestion",
            Error::TrainingAborted { .. } => "training-aborted",
            Error::Fit(_) => "fit",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
