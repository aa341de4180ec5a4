use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown integrand `{0}`")]
    UnknownIntegrand(String),

    #[error("invalid coefficient table: {0}")]
    InvalidCoefficientTable(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("resolution {requested} exceeds the cap of {cap} nodes per edge")]
    ResolutionOverflow { requested: usize, cap: usize },

    #[error("non-finite integrand value at x = {x:?}")]
    NonFiniteEnergy { x: Vec<f64> },

    #[error("non-finite energy gradient")]
    NonFiniteGradient,

    #[error("line search diverged: energy became non-finite")]
    DivergentLineSearch,

    #[error("schedule `{name}` must be {expected}")]
    Schedule { name: &'static str, expected: &'static str },

    #[error("point {x:?} lies closer than {margin} to the boundary of the ambient cube")]
    TooCloseToBoundary { x: Vec<f64>, margin: f64 },

    #[error("set function returned {value} on cube centered at {center:?} with side {side}")]
    InvalidSetValue {
        value: f64,
        center: Vec<f64>,
        side: f64,
    },

    #[error("cubes {0} and {1} overlap")]
    OverlappingCubes(usize, usize),

    #[error("cube {0} is not contained in the ambient cube")]
    CubeOutsideDomain(usize),

    #[error("integrand `{0}` is not periodic")]
    NotPeriodic(String),

    #[error("integrand `{0}` is not declared Caratheodory; use l0_density instead")]
    NotCaratheodory(String),

    #[error("integrand `{0}` is not coercive (alpha = 0); this operation requires p-coercivity")]
    NotCoercive(String),

    #[error("density evaluation failed at sample {index}: {source}")]
    DensityFailure {
        index: usize,
        #[source]
        source: Box<Error>,
        partial: Vec<crate::relax::DensityEstimate>,
    },

    #[error("unknown verification suite `{0}`")]
    UnknownSuite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad input rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownIntegrand(_)
                | Error::InvalidCoefficientTable(_)
                | Error::InvalidParameter { .. }
                | Error::DimensionMismatch(_)
                | Error::ResolutionOverflow { .. }
                | Error::Schedule { .. }
                | Error::TooCloseToBoundary { .. }
                | Error::OverlappingCubes(..)
                | Error::CubeOutsideDomain(_)
                | Error::NotPeriodic(_)
                | Error::NotCaratheodory(_)
                | Error::NotCoercive(_)
                | Error::UnknownSuite(_)
        )
    }
}
