use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("study {study_id} has a boundary count ({events}/{trials}); log-odds are undefined without a continuity correction")]
    BoundaryCount {
        study_id: u32,
        events: u64,
        trials: u64,
    },

    #[error("unknown name {name:?}; valid names: {}", valid.join(", "))]
    NotFound { name: String, valid: Vec<String> },

    #[error("{0}")]
    Domain(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("covariate design matrix is rank deficient")]
    SingularDesign,

    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage/validation, 3 resource limit,
    /// 4 internal numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::BoundaryCount { .. }
            | Error::NotFound { .. }
            | Error::Domain(_) => 2,
            Error::ResourceLimit(_) => 3,
            Error::SingularDesign | Error::Numeric(_) => 4,
        }
    }
}
