use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("empty graph: {0}")]
    EmptyGraph(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("eigensolver did not converge after {iterations} iterations (best residual {best_residual:e})")]
    Convergence { iterations: usize, best_residual: f64 },

    #[error("size error: {0}")]
    Size(String),

    #[error("degenerate cut: {0}")]
    DegenerateCut(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("nothing to evaluate: {0}")]
    EmptyEval(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image `{image}`: {source}")]
    Image {
        image: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "FormatError",
            Error::Data(_) => "DataError",
            Error::Shape(_) => "ShapeError",
            Error::Range(_) => "RangeError",
            Error::EmptyGraph(_) => "EmptyGraphError",
            Error::Partition(_) => "PartitionError",
            Error::Convergence { .. } => "ConvergenceError",
            Error::Size(_) => "SizeError",
            Error::DegenerateCut(_) => "DegenerateCutError",
            Error::EmptyMask(_) => "EmptyMaskError",
            Error::Label(_) => "LabelError",
            Error::EmptyEval(_) => "EmptyEvalError",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
            Error::Image { source, .. } => source.kind(),
        }
    }

    /// Innermost error, looking through image annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Image { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn for_image(self, image: impl Into<String>) -> Self {
        Error::Image { image: image.into(), source: Box::new(self) }
    }
}
