use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid sizes, unknown names or inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value outside an operation's mathematical domain (e.g. `t <= 0`).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A non-finite value showed up where a finite one was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Prefixes the message with the outer-loop iteration that produced it.
    pub fn at_iteration(self, k: usize) -> Error {
        match self {
            Error::Numeric(m) => Error::Numeric(format!("iteration {k}: {m}")),
            Error::Diverged(m) => Error::Diverged(format!("iteration {k}: {m}")),
            Error::Argument(m) => Error::Argument(format!("iteration {k}: {m}")),
            other => other,
        }
    }
}
