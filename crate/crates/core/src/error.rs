use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TbmaError>;

#[derive(Debug, Error)]
pub enum TbmaError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no model move available: every covariate is forced into the model")]
    NoMoveAvailable,

    #[error("chain output holds no stored sweeps")]
    EmptyChain,

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("schema error: column `{column}` not found")]
    Schema { column: String },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("chain {chain} failed at sweep {sweep}: {source}")]
    ChainFailed {
        chain: u64,
        sweep: usize,
        #[source]
        source: Box<TbmaError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
