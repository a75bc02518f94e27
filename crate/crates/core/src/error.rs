use thiserror::Error;

pub type Result<T, E = CureError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CureError {
    /// Parameters outside the support of a distribution (e.g. geometric with θ ≥ 1).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("series for {what} did not converge within {terms} terms")]
    SeriesNonConvergence { what: &'static str, terms: usize },

    #[error("density singular: {0}")]
    Singularity(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("subject {subject}: covariate `{name}` is missing")]
    MissingCovariate { subject: String, name: String },

    #[error("subject {subject}: event density is zero")]
    ZeroDensity { subject: String },

    #[error("cure probability is numerically one; susceptible survival is undefined")]
    DegenerateCure,

    #[error("log of non-positive value in {term}")]
    NonPositiveLog { term: String },

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("observed information matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Io(String),
}

impl CureError {
    /// True for errors that stem from parameter values leaving the model's
    /// numerical domain rather than from malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CureError::Domain(_)
                | CureError::SeriesNonConvergence { .. }
                | CureError::Singularity(_)
                | CureError::ZeroDensity { .. }
                | CureError::DegenerateCure
                | CureError::NonPositiveLog { .. }
                | CureError::Optimizer(_)
                | CureError::NotPositiveDefinite
        )
    }
}

impl From<std::io::Error> for CureError {
    fn from(e: std::io::Error) -> Self {
        CureError::Io(e.to_string())
    }
}
