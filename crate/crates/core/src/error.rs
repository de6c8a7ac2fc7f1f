use thiserror::Error;

/// Errors raised across the simulation and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    Design(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid recruitment configuration: {0}")]
    Recruitment(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error(
        "rank-deficient fixed-effect design: column `{column}` lies in the span of the others"
    )]
    RankDeficient { column: String },

    #[error("leverage correction is singular for cluster `{cluster}`")]
    SingularLeverage { cluster: String },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error("data validation: {0}")]
    Validation(String),

    #[error("scenario configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed input data or configuration
    /// rather than a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Design(_)
                | Error::OutOfRange(_)
                | Error::Recruitment(_)
                | Error::Parameter(_)
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
