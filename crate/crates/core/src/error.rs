//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("{value} is outside {range} for {what}")]
    Range {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("coverage mismatch in {what}: {detail}")]
    Coverage { what: &'static str, detail: String },

    #[error("integrity check failed for {path}: expected {expected}, found {found}")]
    Integrity {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error("backbone `{name}` is unavailable: {reason}")]
    BackboneUnavailable { name: String, reason: String },

    #[error("fold {fold} failed (partial results in {partial}): {source}")]
    FoldFailed {
        fold: usize,
        partial: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{} problem(s) in {}:{}", .issues.len(), .path.display(), list_issues(.issues))]
    InvalidConfig {
        path: PathBuf,
        issues: Vec<ConfigIssue>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One problem found while validating a configuration file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    /// Dotted field path, e.g. `distill.smoothing`.
    pub field: String,
    /// 1-based line of the field in the file, when it could be located.
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

fn list_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("\n  {i}")).collect()
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
