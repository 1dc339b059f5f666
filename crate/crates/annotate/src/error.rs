pub type Result<T, E = AnnotateError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("unknown record `{0}`")]
    NotFound(String),
    #[error("version conflict on `{record_id}`: expected {expected}, current {current}")]
    Conflict {
        record_id: String,
        expected: i64,
        current: i64,
    },
    #[error("{0}")]
    Validation(String),
    #[error("points outside [0,1]: {0:?}")]
    InvalidPoints(Vec<usize>),
    #[error("detector failed: {0}")]
    Detector(String),
    #[error(transparent)]
    Core(#[from] dmsl_core::Error),
    #[error(transparent)]
    Sql(#[from] rusqlite::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AnnotateError {
    pub fn is_validation(&self) -> bool {
        match self {
            AnnotateError::Validation(_) | AnnotateError::InvalidPoints(_) | AnnotateError::Json(_) => true,
            AnnotateError::Core(e) => e.is_validation(),
            _ => false,
        }
    }
}
