use std::fmt;

use mvft::MvftError;

/// A command failure with its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// Exit 2.
    Config(String),
    /// Exit 3.
    Data(String),
    /// Exit 1.
    Internal(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    /// Wraps a failure while reading input data: everything but a config
    /// error is a data error.
    pub fn data(context: impl fmt::Display) -> impl FnOnce(MvftError) -> Failure {
        move |e| match e {
            MvftError::Config(m) => Failure::Config(m),
            other => Failure::Data(format!("{context}: {other}")),
        }
    }
}

impl From<MvftError> for Failure {
    fn from(e: MvftError) -> Self {
        match e {
            MvftError::Config(m) => Failure::Config(m),
            e @ (MvftError::Empty(_)
            | MvftError::Parse { .. }
            | MvftError::Checksum(_)
            | MvftError::Version { .. }
            | MvftError::Schema { .. }) => Failure::Data(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(format!("writing output: {e}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}
