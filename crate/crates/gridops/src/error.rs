use gridops_core::Error as DomainError;

/// Failure surfaced by the service, the CLI or the store.
#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no client identity presented")]
    Unauthenticated,
    #[error("subject {0:?} is not mapped to a contact; view access only")]
    UnknownDn(String),
    #[error("{message}")]
    BadRequest { code: &'static str, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("data directory {0} is locked by another process")]
    Locked(String),
    #[error("store: {0}")]
    Store(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl SuiteError {
    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        SuiteError::BadRequest { code, message: message.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            SuiteError::Domain(e) => e.code(),
            SuiteError::Unauthenticated => "UNAUTHENTICATED",
            SuiteError::UnknownDn(_) => "UNKNOWN_DN",
            SuiteError::BadRequest { code, .. } => code,
            SuiteError::Config(_) => "CONFIG",
            SuiteError::Locked(_) => "STORE_LOCKED",
            SuiteError::Store(_) => "STORE_ERROR",
            SuiteError::Io(_) => "IO_ERROR",
        }
    }

    /// Caller mistakes as opposed to faults of the service itself.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, SuiteError::Store(_))
    }
}

impl From<serde_json::Error> for SuiteError {
    fn from(e: serde_json::Error) -> Self {
        SuiteError::bad_request("INVALID_JSON", e.to_string())
    }
}
