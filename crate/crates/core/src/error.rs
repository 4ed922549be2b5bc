use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?}")]
    InvalidShape { op: &'static str, shape: Vec<usize> },
    #[error("division by zero in element {index}")]
    DivisionByZero { index: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("kernel {kernel:?} too large for input {input:?}")]
    KernelTooLarge { kernel: (usize, usize), input: Vec<usize> },
    #[error("expected a scalar node, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("bad magic {0:?}, expected \"GHOG\"")]
    BadMagic([u8; 4]),
    #[error("unsupported descriptor version {0}")]
    VersionMismatch(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("optimization diverged at iteration {iteration}: E = {value:e} (initial {initial:e})")]
    Diverged {
        iteration: usize,
        value: f64,
        initial: f64,
    },
    #[error("all {0} restarts diverged")]
    AllRestartsDiverged(usize),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
