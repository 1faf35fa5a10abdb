use std::path::PathBuf;

/// Errors raised by the library.
///
/// The variants follow the failure classes the command-line front end maps
/// onto exit codes: configuration and input problems, I/O, and numeric
/// failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (e.g. `t > 1`).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data has the wrong shape or contains non-finite values.
    #[error("input error: {0}")]
    Input(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// A checkpoint or archive could not be decoded.
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    /// Training or sampling produced NaN/inf.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An internal invariant was violated.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        // Negation, not the flipped comparison: NaN must fail the check.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
