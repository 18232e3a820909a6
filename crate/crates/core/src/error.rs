use std::fmt;

/// One of the two input modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::A => write!(f, "A"),
            Modality::B => write!(f, "B"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not positive definite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NonPositiveDefinite { min_eig: f64, max_eig: f64 },
    #[error("empirical input correlation is rank deficient (P = {samples})")]
    RankDeficient { samples: usize },
    #[error("correlation block {0} is singular")]
    SingularBlock(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operation requires a linear network")]
    NotLinear,
    #[error("logistic loss requires targets in {{-1, +1}}")]
    BadLabels,
    #[error("training diverged at step {step} (loss {loss:e})")]
    Diverged { step: usize, loss: f64 },
    #[error("modality {modality} never reached half of its target")]
    NoCrossing { modality: Modality },
    #[error("modalities are collinear: the effective correlation of the slower modality vanishes")]
    CollinearModalities,
    #[error("argument outside the formula's domain: {0}")]
    BadDomain(String),
    #[error("no closed-form solution: {0}")]
    NotSolvable(String),
    #[error("modalities tie in input-output correlation norm")]
    Tie,
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(key: impl Into<String>, msg: impl Into<String>) -> Error {
        Error::Invalid {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
