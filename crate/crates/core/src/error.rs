use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate frame: standard deviation {sd:e} is at or below the floor")]
    DegenerateFrame { sd: f64 },
    #[error("border {border} too large for a grid with {n} pixels per side")]
    BorderTooLarge { border: usize, n: usize },
    #[error("{0} is not a perfect square")]
    NotPerfectSquare(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("diffusivity must be positive, got {0}")]
    NonpositiveDiffusion(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max pooling needs an even side length, got {0}")]
    OddSide(usize),
    #[error("forward cache does not match the parameters being differentiated")]
    StaleCache,
    #[error("Cholesky factorization failed: {0}")]
    CholeskyFailure(String),
    #[error("minibatch is empty")]
    EmptyBatch,
    #[error("non-finite log-likelihood in minibatch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("residual fields are numerically zero")]
    DegenerateResiduals,
    #[error("need {needed} frames, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("innovation covariance is singular")]
    SingularInnovationCov,
    #[error("optimizer found no point with a finite objective")]
    OptimizerFailure,
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("interval lower bound {lower} exceeds upper bound {upper}")]
    InvertedInterval { lower: f64, upper: f64 },
    #[error("score reports cover different pixels or times: {0}")]
    MismatchedCoverage(String),
    #[error("unstable simulation config: {0}")]
    UnstableConfig(String),
    #[error("cannot sample {m} pixels from a grid of {available}")]
    TooManyPixels { m: usize, available: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("shape mismatch on load: {0}")]
    ShapeMismatchOnLoad(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than by inputs or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateFrame { .. }
                | Error::NonpositiveDiffusion(_)
                | Error::CholeskyFailure(_)
                | Error::NonFiniteLoss { .. }
                | Error::DegenerateResiduals
                | Error::SingularInnovationCov
                | Error::OptimizerFailure
                | Error::UnstableConfig(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::TruncatedPayload(_)
                | Error::ShapeMismatchOnLoad(_)
                | Error::Parse(_)
        )
    }
}
