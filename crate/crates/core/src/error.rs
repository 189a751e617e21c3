use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] bevgen_numcore::Error),

    #[error("{what}: index {index} out of range for {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{0} is not invertible")]
    Singular(&'static str),

    #[error("invalid camera rig: {0}")]
    Rig(String),

    #[error("rig file line {line}: {msg}")]
    RigFile { line: usize, msg: String },

    #[error("unknown {kind} strategy {name:?} (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("{0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
