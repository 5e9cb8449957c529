//! The failure type every command funnels into: a stable machine-readable
//! code plus a human-readable detail line. On failure the binary prints
//! `{"error": code, "detail": ...}` to standard error and exits nonzero.

use std::fmt;

#[derive(Debug)]
pub struct CliFailure {
    pub code: String,
    pub detail: String,
}

pub type Result<T> = std::result::Result<T, CliFailure>;

impl CliFailure {
    pub fn new(code: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into() }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Self::new("InvalidConfig", detail)
    }

    pub fn io(path: &str, err: std::io::Error) -> Self {
        Self::new("Io", format!("{path}: {err}"))
    }

    /// The machine-readable stderr payload.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.code, "detail": self.detail }).to_string()
    }
}

impl fmt::Display for CliFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

impl std::error::Error for CliFailure {}

impl From<knots_core::Error> for CliFailure {
    fn from(err: knots_core::Error) -> Self {
        Self::new(err.code(), err.to_string())
    }
}

impl From<std::io::Error> for CliFailure {
    fn from(err: std::io::Error) -> Self {
        Self::new("Io", err.to_string())
    }
}

impl From<serde_json::Error> for CliFailure {
    fn from(err: serde_json::Error) -> Self {
        Self::new("ParseError", err.to_string())
    }
}
