use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Inputs violate an operation's shape or range contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A row (or whole input) has no direction or no variance.
    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Optimisation produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("frozen parameter group `{0}` was modified")]
    FrozenMutated(String),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate { op, detail: detail.into() }
    }
}
