use std::path::PathBuf;

use thiserror::Error;

use crate::money::Money;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset {0} contains no records")]
    EmptyDataset(PathBuf),

    #[error("duplicate record id {id} at line {line}")]
    DuplicateId { id: usize, line: usize },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown model id `{0}`")]
    UnknownModel(String),

    #[error("record id sets differ: {0}")]
    IdMismatch(String),

    #[error("budget {budget} cannot cover the sample batch ({spent}) plus the cheapest proxy pass ({proxy})")]
    BudgetInfeasible {
        budget: Money,
        spent: Money,
        proxy: Money,
    },

    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("transport failure: {0}")]
    Transport(String),

    #[error("unparseable model output after {attempts} attempts: {message}")]
    Parse { attempts: usize, message: String },

    #[error("replay cache has no entry for {capability} request {digest}")]
    CacheMiss { capability: String, digest: String },

    #[error("oracle configuration: {0}")]
    Config(String),

    #[error("request rejected: {0}")]
    InvalidRequest(String),

    #[error("unknown model id `{0}`")]
    UnknownModel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
