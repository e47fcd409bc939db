use thiserror::Error;

use crate::engine::DrawIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One validation failure inside a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid config:\n{}", format_issues(.0))]
    InvalidConfig(Vec<ConfigIssue>),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("numerical divergence at (t={}, e={}, h={}) on client {client}", .at.t, .at.e, .at.h)]
    Diverged { at: DrawIndex, client: usize },

    #[error("lipschitz estimate failed to converge after {} iterations", .trace.len())]
    EstimateFailed { trace: Vec<f64> },

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("partition failed: a client stayed empty after {retries} resamples")]
    PartitionFailed { retries: usize },

    #[error("level {level} cannot aggregate at r={r}: period {period} does not divide r+1")]
    Schedule { level: usize, r: usize, period: usize },

    #[error("internal state error: {0}")]
    InternalState(String),

    #[error("metric unavailable: {0}")]
    UnavailableMetric(&'static str),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

impl Error {
    /// Process exit status for the CLI: 1 config, 2 numerical divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 2,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
            _ => 1,
        }
    }
}
