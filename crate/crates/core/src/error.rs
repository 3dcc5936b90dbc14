use std::path::PathBuf;

/// Errors raised by the re-optimization engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("co-occurrence statistics are empty (no instances)")]
    EmptyStatistics,

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("concept `{concept}` for label `{label}` is not present in the graph")]
    MissingConcept { label: String, concept: String },

    #[error("nothing to evaluate: ground truth is empty")]
    EmptyGroundTruth,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("all {0} sweep trials failed")]
    AllTrialsFailed(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that happen while running a well-formed job (solver
    /// divergence, I/O) as opposed to bad inputs or configuration.
    pub fn is_runtime(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::Io { .. } | Error::AllTrialsFailed(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
