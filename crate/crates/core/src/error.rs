use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("distribution is not normalized (sum = {0})")]
    NotNormalized(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pair ({p}, {q}) is invalid for a collection of {len} items")]
    InvalidPair { p: usize, q: usize, len: usize },
    #[error("side information needs at least two distinct classes")]
    SingleClass,
    #[error("model with {0} units is too large to enumerate")]
    EnumerationTooLarge(usize),
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} is out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
