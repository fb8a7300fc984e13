use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Error, Debug)]
pub enum SlapError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("degenerate norm: {0}")]
    DegenerateNorm(String),

    #[error("batch size error: {0}")]
    BatchSize(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint version {found} not supported (expected {supported})")]
    Version { found: u32, supported: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, SlapError>;

impl SlapError {
    /// Process exit code class for the CLI: 2 usage/config, 3 IO, 4 internal.
    pub fn exit_code(&self) -> i32 {
        use SlapError::*;
        match self {
            Dimension(_) | Rank(_) | DegenerateNorm(_) | BatchSize(_) | Structure(_)
            | Spec(_) | Config(_) | Parse { .. } | Schema(_) | Data(_) | Unsupported(_) => 2,
            Io(_) | Corrupt(_) | Version { .. } => 3,
            Contract(_) | Internal(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_cover_all_classes() {
        assert_eq!(SlapError::Config("x".into()).exit_code(), 2);
        assert_eq!(SlapError::Schema("x".into()).exit_code(), 2);
        assert_eq!(SlapError::Unsupported("x".into()).exit_code(), 2);
        assert_eq!(
            SlapError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x")).exit_code(),
            3
        );
        assert_eq!(SlapError::Corrupt("x".into()).exit_code(), 3);
        assert_eq!(SlapError::Version { found: 9, supported: 1 }.exit_code(), 3);
        assert_eq!(SlapError::Contract("x".into()).exit_code(), 4);
        assert_eq!(SlapError::Internal("x".into()).exit_code(), 4);
    }
}
