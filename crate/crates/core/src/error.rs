use std::fmt;

use thiserror::Error;

/// One problem found while loading a configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    /// Dotted key path (or `line N` for syntax errors).
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid problem specification: {0}")]
    Spec(String),

    #[error("CFL violated for control {control}: dt = {dt} exceeds max admissible {max_dt}")]
    Cfl {
        control: usize,
        dt: f64,
        max_dt: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("configuration error: {}", join_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
