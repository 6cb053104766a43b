use thiserror::Error;

/// Errors surfaced by kernels, predictors, simulators, and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("protocol error at round {round}: {msg}")]
    Protocol { round: usize, msg: String },

    #[error("induced subgraph has {nodes} nodes, exceeds max {max}")]
    SubgraphSize { nodes: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("positive-semidefiniteness violation: {0}")]
    PsdViolation(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn protocol(round: usize, msg: impl Into<String>) -> Self {
        Error::Protocol { round, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
