use std::path::PathBuf;

use crate::scene::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The input did not parse as the expected document format.
    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    /// The input parsed but violates one or more scene invariants.
    #[error("validation failed:{}", format_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inputs are geometrically degenerate for the requested fit.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Path planning could not connect two points.
    #[error("unreachable: {0}")]
    Unreachable(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Validation(_) | Error::InvalidArgument(_) => 2,
            Error::Degenerate(_) => 3,
            Error::Unreachable(_) => 4,
            Error::Numerical(_) => 1,
        }
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("\n  {d}")).collect()
}
