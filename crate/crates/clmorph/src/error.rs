use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor/volume shapes do not line up.
    Dimension(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Math domain violation (log of non-positive input, non-finite logvar, ...).
    Domain(String),
    /// API misuse (backward on a non-scalar, ...).
    Usage(String),
    /// Malformed file; `offset` is the byte position where parsing failed.
    Format { offset: u64, message: String },
    /// Procedural generation could not satisfy its constraints.
    Generation(String),
    /// Training produced a non-finite loss; per-term values for diagnosis.
    NonFinite {
        context: String,
        total: f64,
        recon: f64,
        smooth: f64,
        contrast: f64,
    },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::NonFinite {
                context,
                total,
                recon,
                smooth,
                contrast,
            } => write!(
                f,
                "non-finite loss in {context}: total={total} recon={recon} \
                 smooth={smooth} contrast={contrast}"
            ),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
