use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped loosely by the stage that raises them. The CLI maps
/// [`Error::Io`] to its I/O exit code and everything else to a data error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line does not match the {dialect} frame grammar: {line:?}")]
    NonFrameLine { dialect: &'static str, line: String },
    #[error("frame has no resolvable symbol: {line:?}")]
    UnresolvedSymbol { line: String },

    #[error("training corpus contains no frames")]
    EmptyCorpus,
    #[error("trace {0:?} has no frames")]
    EmptyTrace(String),

    #[error("invalid model dimensions: {0}")]
    BadDimensions(String),
    #[error("symbol {symbol} is out of range for an alphabet of size {n_symbols}")]
    SymbolOutOfRange { symbol: usize, n_symbols: usize },
    #[error("no training sequences")]
    EmptyTrainingSet,
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("observation sequence has zero likelihood under the model")]
    ZeroLikelihood,
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("validation labels contain a single class")]
    SingleClassValidation,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("score is not a number")]
    NonFiniteScore,
    #[error("at least {needed} detectors are required, got {got}")]
    TooFewDetectors { needed: usize, got: usize },
    #[error("no score supplied for base detector {0}")]
    MissingDetectorScore(usize),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("class {class} of field {field:?} has {size} traces, at least {min} required")]
    ClassTooSmall {
        field: String,
        class: &'static str,
        size: usize,
        min: usize,
    },
    #[error("report id {0:?} appears more than once")]
    DuplicateReportId(String),
    #[error("unknown report id {0:?} in split")]
    UnknownReportId(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}
