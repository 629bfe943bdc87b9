//! Error type shared by every subsystem.

use crate::oracle::QueryLedger;
use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Clone)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    Dimension(String),
    /// Numeric domain violation (log of a non-positive value, non-finite literal).
    Domain(String),
    /// A caller broke an operation's contract (non-scalar loss, non-one-hot rows, ...).
    Contract(String),
    /// The oracle refused a query that would exceed its budget.
    BudgetExhausted {
        budget: u64,
        requested: u64,
        ledger: QueryLedger,
    },
    /// Bad run configuration.
    Config(String),
    /// Parse failure in a config, checkpoint, or CSV file.
    Parse { line: usize, message: String },
    /// Filesystem problem, stringified from std::io::Error.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::BudgetExhausted {
                budget,
                requested,
                ledger,
            } => write!(
                f,
                "query budget exhausted: budget {budget}, would need {requested} \
                 (spent so far: {})",
                ledger.total_samples
            ),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
