use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {context} (expected {expected}, got {actual})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("pressure solve failed: {0}")]
    PressureSolve(String),

    #[error("saturation sub-step count {required} exceeds cap {cap} at step {step}")]
    SubstepCap {
        step: usize,
        required: usize,
        cap: usize,
    },

    #[error("alpha search exhausted {0} doublings without satisfying the discrepancy inequality")]
    AlphaSearchExhausted(usize),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
