use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A run hit a non-finite loss. `checkpoint` is the last checkpoint that
    /// was written with finite parameters, if any.
    #[error("numeric abort at epoch {epoch}, step {step}: {detail}{}", match .checkpoint {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => String::new(),
    })]
    NumericAbort {
        epoch: usize,
        step: usize,
        detail: String,
        checkpoint: Option<PathBuf>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {detail}", .path.display())]
    Parse { path: PathBuf, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::NumericAbort { .. } => 3,
            Error::Io { .. } | Error::Parse { .. } => 4,
            Error::Shape { .. } | Error::Contract(_) => 1,
        }
    }
}
