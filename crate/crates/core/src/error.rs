//! Error taxonomy shared by every module in the crate.
//!
//! Variants are deliberately fine-grained so callers (and the CLI's
//! machine-readable error objects) can distinguish *what kind* of thing went
//! wrong: a malformed file, an ill-shaped tensor, a degenerate statistic, an
//! out-of-range hyperparameter, and so on.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure (file missing, permission denied, ...).
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// The container header (or another structured input) is not valid.
    #[error("parse error: {0}")]
    Parse(String),

    /// The container declares a dtype this crate does not handle.
    #[error("unsupported dtype {found:?} for tensor {key:?} (only F32 is supported)")]
    UnsupportedDtype { key: String, found: String },

    /// The container's byte layout is inconsistent with its header.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    /// An adapter is missing one half of a low-rank factor pair.
    #[error("incomplete adapter: layer {layer:?} is missing its {missing} factor")]
    IncompleteAdapter { layer: String, missing: String },

    /// Factor shapes disagree about the adapter rank.
    #[error("rank mismatch: {0}")]
    RankMismatch(String),

    /// Tensor dimensions are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A referenced key is absent from the map it must exist in.
    #[error("key error: {0}")]
    Key(String),

    /// An operation over a collection of task updates received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A drop probability outside [0, 1).
    #[error("invalid probability: {0}")]
    InvalidProbability(String),

    /// An activation batch whose centered norm vanishes has no defined CKA.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A probe batch is missing for a layer that needs one.
    #[error("missing probe for layer {0:?}")]
    MissingProbe(String),

    /// A task vector with zero norm has no defined cosine.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// A baseline accuracy that is zero or negative cannot normalize.
    #[error("degenerate baseline: {0}")]
    DegenerateBaseline(String),

    /// Hits@k asked about a k outside [1, label count].
    #[error("invalid k: {0}")]
    InvalidK(String),

    /// Label names and head rows disagree, or labels reference missing names.
    #[error("label spec error: {0}")]
    LabelSpec(String),

    /// A hyperparameter grid is empty or contains out-of-range values.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// A configuration violates its documented invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Stable machine-readable code for this error, used by the CLI's
    /// `{error, detail}` objects. Codes never change once shipped.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::Parse(_) => "ParseError",
            Error::UnsupportedDtype { .. } => "UnsupportedDtype",
            Error::CorruptFile(_) => "CorruptFile",
            Error::IncompleteAdapter { .. } => "IncompleteAdapter",
            Error::RankMismatch(_) => "RankMismatch",
            Error::Shape(_) => "ShapeError",
            Error::Key(_) => "KeyError",
            Error::EmptyInput(_) => "EmptyInput",
            Error::InvalidProbability(_) => "InvalidProbability",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::MissingProbe(_) => "MissingProbe",
            Error::DegenerateVector(_) => "DegenerateVector",
            Error::DegenerateBaseline(_) => "DegenerateBaseline",
            Error::InvalidK(_) => "InvalidK",
            Error::LabelSpec(_) => "LabelSpecError",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }

    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
