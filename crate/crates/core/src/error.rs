//! Error types shared across the engine.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A value violates an operation's preconditions (non-finite numbers,
    /// out-of-range hyperparameters, malformed datasets, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two models or blocks that must share structure do not (differing
    /// block ids, tensor names, or shapes).
    #[error("incompatible structure: {0}")]
    IncompatibleStructure(String),

    /// A required earlier-round model is no longer retained.
    #[error("missing state: {0}")]
    MissingState(String),

    /// A serialized message could not be decoded. `offset` is the byte
    /// position at which decoding failed.
    #[error("malformed message at byte {offset}: {reason}")]
    MalformedMessage { offset: usize, reason: String },

    /// The message header carries a protocol version this build cannot read.
    #[error("unsupported protocol version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    /// An internal consistency check failed mid-run (server/client state
    /// divergence, byte-accounting mismatch). Always a bug, never user error.
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn incompatible(msg: impl Into<String>) -> Self {
        Error::IncompatibleStructure(msg.into())
    }
}
