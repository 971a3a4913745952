use thiserror::Error;

pub type Result<T, E = MvftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MvftError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("line {line}: {kind}: {text:?}")]
    Parse {
        line: usize,
        kind: ParseErrorKind,
        text: String,
    },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    FieldCount(usize),
    BadInteger(&'static str),
    BadFloat(&'static str),
    NonFinite(&'static str),
    EmptyActivity,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::FieldCount(n) => write!(f, "field-count: expected 6 fields, found {n}"),
            ParseErrorKind::BadInteger(field) => write!(f, "non-integer {field}"),
            ParseErrorKind::BadFloat(field) => write!(f, "non-numeric {field}"),
            ParseErrorKind::NonFinite(field) => write!(f, "non-finite {field}"),
            ParseErrorKind::EmptyActivity => write!(f, "empty activity label"),
        }
    }
}

impl MvftError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MvftError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        MvftError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MvftError::Config(msg.into())
    }
}
