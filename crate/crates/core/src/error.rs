use thiserror::Error;

pub type Result<T, E = EditError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("NotSPD: {0}")]
    NotSpd(String),
    #[error("Singular: {0}")]
    Singular(String),
    #[error("SingularGram: {0}")]
    SingularGram(String),
    #[error("DuplicateKeys: edit keys {0} and {1} are near-parallel")]
    DuplicateKeys(usize, usize),
    #[error("DegenerateKey: k^T C0^-1 k = {0:e}")]
    DegenerateKey(f64),
    #[error("Diverged: {0}")]
    Diverged(String),
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("NonFinite: {0}")]
    NonFinite(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("UnknownFactId: {0}")]
    UnknownFactId(usize),
    #[error("SchemaMismatch: {0}")]
    SchemaMismatch(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("JsonError: {0}")]
    Json(#[from] serde_json::Error),
}

impl EditError {
    /// Failures caused by the numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EditError::NotSpd(_)
                | EditError::Singular(_)
                | EditError::SingularGram(_)
                | EditError::DuplicateKeys(..)
                | EditError::DegenerateKey(_)
                | EditError::Diverged(_)
                | EditError::NonFinite(_)
        )
    }
}
