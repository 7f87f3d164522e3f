//! Error taxonomy shared by the server, the workers and the workflow side.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closed set of error codes carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ApiErrorCode {
    Unauthorized,
    DeviceUnknown,
    TaskUnknown,
    TaskRejected,
    BadRequest,
    PayloadTooLarge,
}

impl ApiErrorCode {
    /// HTTP status the code maps to.
    pub fn http_status(self) -> u16 {
        match self {
            ApiErrorCode::Unauthorized => 401,
            ApiErrorCode::DeviceUnknown | ApiErrorCode::TaskUnknown => 404,
            ApiErrorCode::TaskRejected => 409,
            ApiErrorCode::BadRequest => 400,
            ApiErrorCode::PayloadTooLarge => 413,
        }
    }
}

impl std::fmt::Display for ApiErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ApiErrorCode::Unauthorized => "UNAUTHORIZED",
            ApiErrorCode::DeviceUnknown => "DEVICE_UNKNOWN",
            ApiErrorCode::TaskUnknown => "TASK_UNKNOWN",
            ApiErrorCode::TaskRejected => "TASK_REJECTED",
            ApiErrorCode::BadRequest => "BAD_REQUEST",
            ApiErrorCode::PayloadTooLarge => "PAYLOAD_TOO_LARGE",
        };
        f.write_str(s)
    }
}

/// Reasons the workflow backend rejects a task before it reaches the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectionReason {
    UnknownDevice,
    NotInitialized,
    ConstraintUnmet,
    DuplicateName,
    BadRequest,
}

impl std::fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectionReason::UnknownDevice => "UNKNOWN_DEVICE",
            RejectionReason::NotInitialized => "NOT_INITIALIZED",
            RejectionReason::ConstraintUnmet => "CONSTRAINT_UNMET",
            RejectionReason::DuplicateName => "DUPLICATE_NAME",
            RejectionReason::BadRequest => "BAD_REQUEST",
        };
        f.write_str(s)
    }
}

/// Runtime errors.
#[derive(Debug, Error)]
pub enum Error {
    /// An API call failed with one of the wire error codes.
    #[error("{code}: {message}")]
    Api { code: ApiErrorCode, message: String },

    /// The backend selector rejected a task.
    #[error("task rejected ({reason}): {message}")]
    Rejected {
        reason: RejectionReason,
        message: String,
    },

    /// The workflow manager is not connected yet.
    #[error("not connected: call start_fed_dart first")]
    NotConnected,

    /// The workflow manager is already connected.
    #[error("already connected")]
    AlreadyConnected,

    /// Connecting to the server failed.
    #[error("connect failed: {0}")]
    ConnectFailed(String),

    /// The initialization phase did not finish within the configured timeout.
    #[error("initialization phase timed out after {0:.1}s")]
    InitTimeout(f64),

    /// A configuration file is missing or malformed.
    #[error("bad config: {0}")]
    BadConfig(String),

    /// Transport-level failure (network, serialization).
    #[error("transport error: {0}")]
    Transport(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn api(code: ApiErrorCode, message: impl Into<String>) -> Self {
        Error::Api {
            code,
            message: message.into(),
        }
    }

    pub fn rejected(reason: RejectionReason, message: impl Into<String>) -> Self {
        Error::Rejected {
            reason,
            message: message.into(),
        }
    }

    /// The wire code of this error, if it maps to one.
    pub fn api_code(&self) -> Option<ApiErrorCode> {
        match self {
            Error::Api { code, .. } => Some(*code),
            Error::Rejected { .. } => Some(ApiErrorCode::TaskRejected),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
