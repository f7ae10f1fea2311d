use thiserror::Error;

/// Failures at the planner or image backend boundary.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("could not decode backend response: {0}")]
    Decoding(String),
    #[error("backend rejected the request: {0}")]
    RemoteRejection(String),
    #[error("no transcript entry for request digest {digest}")]
    NoTranscriptEntry { digest: String },
    #[error("mask mismatch: {0}")]
    MaskMismatch(String),
    #[error("invalid backend request: {0}")]
    InvalidRequest(String),
}
