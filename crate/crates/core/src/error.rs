use thiserror::Error;

/// Errors raised by the numerical kernels and experiment drivers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A state, costate or loss left the finite range (or the |z| guard).
    #[error("numeric blow-up in {stage} at index {index}")]
    BlowUp { stage: &'static str, index: usize },

    /// A trajectory cache was used with an ensemble it was not built from.
    #[error("stale trajectory cache: built for generation {cache}, ensemble is at {ensemble}")]
    StaleCache { cache: u64, ensemble: u64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("measure size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("brute-force W2 limited to n <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },

    /// Second moment of the parameter ensemble exceeded the configured ceiling.
    #[error("second moment {moment:.3e} exceeded ceiling {ceiling:.3e} at s = {s}")]
    MomentCeiling { moment: f64, ceiling: f64, s: f64 },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn is_blow_up(&self) -> bool {
        matches!(self, Error::BlowUp { .. } | Error::MomentCeiling { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
