use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension {dim} exceeds the configured cap of {cap}")]
    DimensionOverflow { dim: usize, cap: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{what} index {index} out of range (size {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("state is not normalized (norm² = {0})")]
    NotNormalized(f64),

    #[error("matrix is not Hermitian (max defect {0:e})")]
    NotHermitian(f64),

    #[error("population {leak:e} leaked above the Fock cutoff (tolerance {tolerance:e}); raise the cutoff")]
    TruncationLeak { leak: f64, tolerance: f64 },

    #[error("spin {spin} does not couple to mode {mode} (zero Rabi frequency)")]
    NotCoupled { spin: usize, mode: usize },

    #[error("missing calibration: {0}")]
    MissingCalibration(String),

    #[error("non-physical input: {0}")]
    NonPhysical(String),

    #[error("design matrix is rank deficient (condition number {condition:e}); {hint}")]
    RankDeficient { condition: f64, hint: String },

    #[error("{what} is ill-conditioned (condition number {condition:e}); {hint}")]
    IllConditioned {
        what: String,
        condition: f64,
        hint: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("minimization did not converge: {0}")]
    NonConvergence(String),

    #[error("displacement grid is incomplete; missing settings {missing:?}")]
    IncompleteGrid { missing: Vec<Vec<i32>> },

    #[error("protocol assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("no clear minimum in the calibration scan (contrast {contrast:.4})")]
    NoClearMinimum { contrast: f64 },

    #[error("unknown state name '{0}'")]
    UnknownState(String),

    #[error("linear algebra failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for errors caused by malformed or inconsistent inputs, as opposed
    /// to numerical failures of a well-posed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::DimensionMismatch { .. }
                | Error::IndexOutOfRange { .. }
                | Error::NotNormalized(_)
                | Error::NotCoupled { .. }
                | Error::MissingCalibration(_)
                | Error::IncompleteGrid { .. }
                | Error::UnknownState(_)
                | Error::InsufficientData(_)
        )
    }
}
