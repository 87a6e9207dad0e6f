use std::path::PathBuf;

use kpfc_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum KpfcError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("clip {clip_id}: expected frame {expected}, found {found}")]
    Gap {
        clip_id: String,
        expected: u64,
        found: u64,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = KpfcError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl KpfcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable identifier printed as `error[<code>]:`.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Schema { .. } => "schema",
            Self::Gap { .. } => "gap",
            Self::Format(_) => "format",
            Self::Corrupt(_) => "corrupt",
            Self::Usage(_) => "usage",
            Self::Core(e) => match e {
                CoreError::Dimension(_) => "dimension",
                CoreError::Parameter(_) => "parameter",
                CoreError::Numeric(_) => "numeric",
                CoreError::Contract(_) => "contract",
                CoreError::DegenerateBatch(_) => "degenerate-batch",
                CoreError::InsufficientSamples { .. } => "insufficient-samples",
                CoreError::Diverged { .. } => "diverged",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Core(CoreError::Numeric(_) | CoreError::Diverged { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}
