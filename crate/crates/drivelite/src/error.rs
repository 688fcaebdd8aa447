use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
