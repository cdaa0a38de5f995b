use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the operation's domain (bad time, bad shape, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration that is well-formed but unusable.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph generation failed: {0}")]
    Generation(String),

    #[error("integration produced a non-finite state at step {step} (t = {time})")]
    Integration { step: usize, time: f64 },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
