use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid network: {0}")]
    Validation(String),

    /// Zone pairs without a path. Only the first few pairs are kept.
    #[error("{total} unreachable zone pair(s), e.g. {pairs:?}")]
    Unreachable { pairs: Vec<(u32, u32)>, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("no convergence after {iterations} iterations (u change {u_change:.3e}, v change {v_change:.3e})")]
    NotConverged {
        iterations: usize,
        u_change: f64,
        v_change: f64,
    },

    #[error("auction for group {group} failed: {source}")]
    Group {
        group: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// CLI exit code: 2 for bad input/configuration, 1 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Domain(_)
            | Error::TooLarge(_)
            | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
