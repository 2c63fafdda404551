use alloc::string::String;

use thiserror::Error;

/// Errors raised by the core toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("malformed check at {path}: {reason}")]
    MalformedCheck { path: String, reason: String },

    #[error("index {index} out of range (length {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid environment config: {0}")]
    Config(String),

    #[error("environment invariant violated: {0}")]
    EnvInvariant(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("token `{0}` is outside the policy vocabulary")]
    OutOfVocabulary(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step {index} has no reasoning trace")]
    Unannotated { index: usize },

    #[error("reasoning provider failed: {0}")]
    Provider(String),

    #[error("trajectory rejected: {0}")]
    Rejected(String),

    #[error("trajectories do not deviate")]
    NoDeviation,

    #[error("no equivalent-state step with differing actions")]
    Undiagnosable,

    #[error("synthesis failed: {0}")]
    Synthesis(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
