use std::path::PathBuf;

use thiserror::Error;

/// Error categories surfaced by every module and mapped to CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Domain(_) | Error::Shape(_) => {
                "config"
            }
            Error::Io { .. } | Error::Format(_) => "io",
            Error::Numeric(_) => "numeric",
        }
    }

    /// Process exit code for this category: 2 config, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            _ => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}
