use spikelab_numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid parameter: {0}")]
    Param(String),
    /// A spike-domain contract was broken (non-binary spikes, ternary input
    /// where binary is required, membrane/spike mixing).
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("degenerate estimate: {0}")]
    Degenerate(String),
    #[error("event {index}: {msg}")]
    Event { index: usize, msg: String },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}
