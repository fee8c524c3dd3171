use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("ingest error{}: {msg}", record.map(|i| format!(" (record {i})")).unwrap_or_default())]
    Ingest { record: Option<usize>, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("de-identification error: {0}")]
    Deid(String),

    #[error("dsp error: {0}")]
    Dsp(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("missing dependency: {}", .0.display())]
    Missing(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingest(msg: impl Into<String>) -> Self {
        Error::Ingest {
            record: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn ingest_at(record: usize, msg: impl Into<String>) -> Self {
        Error::Ingest {
            record: Some(record),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Missing(_) => 3,
            _ => 4,
        }
    }
}
