use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("linear solve failed: pivot {pivot:e} at row {row} is below tolerance")]
    Singular { row: usize, pivot: f64 },

    #[error("cache does not match the parameters it is used with: {0}")]
    StaleCache(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite loss on client {client} in round {round}: {detail}")]
    NonFinite {
        client: usize,
        round: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
