use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown category `{name}`; valid categories: {valid}")]
    UnknownCategory { name: String, valid: String },

    #[error("grasp generation failed: {0}")]
    GenerationFailed(String),

    #[error("unresolvable prompt: `{0}` names no part of the object")]
    UnresolvablePrompt(String),

    #[error("requested {requested} paraphrases but the bank holds only {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },

    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("simulation unstable at t = {time:.4} s (speed {speed:.1} cm/s)")]
    Unstable { time: f64, speed: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
