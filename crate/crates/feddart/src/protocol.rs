//! REST contract between the workflow backend and the server, and between the
//! server and the client workers.
//!
//! Every request carries the shared key in the [`AUTH_HEADER`] header. All
//! bodies are JSON in the canonical encoding of the core types. Responses are
//! wrapped in an [`Envelope`].
//!
//! Paths:
//!
//! | Method & path                          | Operation          |
//! |----------------------------------------|--------------------|
//! | `POST /api/tasks`                      | add_task           |
//! | `GET /api/tasks/{name}/status`         | get_task_status    |
//! | `GET /api/tasks/{name}/results?amount=N` | get_job_results  |
//! | `DELETE /api/tasks/{name}`             | stop_task          |
//! | `GET /api/devices`                     | list_devices       |
//! | `POST /api/devices/register`           | register_device    |
//! | `POST /api/worker/poll`                | poll_assignment    |
//! | `POST /api/worker/result`              | submit_result      |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::core::{Handle, ParamMap, TaskKind, TaskResult};
use crate::error::{ApiErrorCode, Error};

/// Header carrying the shared key.
pub const AUTH_HEADER: &str = "X-Feddart-Key";

/// Response envelope: `{ok, error?, data?}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ApiErrorCode,
    pub message: String,
}

impl Envelope {
    pub fn ok(data: impl Serialize) -> Self {
        Self {
            ok: true,
            error: None,
            data: Some(serde_json::to_value(data).expect("serializable response")),
        }
    }

    pub fn err(code: ApiErrorCode, message: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(ApiError {
                code,
                message: message.into(),
            }),
            data: None,
        }
    }

    /// Extracts the data payload or converts the error into an [`Error`].
    pub fn into_data<T: serde::de::DeserializeOwned>(self) -> crate::error::Result<T> {
        if self.ok {
            let data = self.data.unwrap_or(Value::Null);
            Ok(serde_json::from_value(data)?)
        } else {
            let err = self.error.unwrap_or(ApiError {
                code: ApiErrorCode::BadRequest,
                message: "missing error detail".into(),
            });
            Err(Error::api(err.code, err.message))
        }
    }
}

/// Response to `POST /api/tasks`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddTaskResponse {
    pub accepted: bool,
    pub handle: Handle,
}

/// Request body for `POST /api/devices/register`. Registration is idempotent
/// by device name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub name: String,
    #[serde(default)]
    pub ip_address: String,
    #[serde(default)]
    pub port: u16,
    #[serde(default)]
    pub hardware_config: Option<BTreeMap<String, Value>>,
    /// Used for the heartbeat window (3x this interval).
    #[serde(default = "default_poll_interval")]
    pub poll_interval_seconds: f64,
}

fn default_poll_interval() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub registered: bool,
}

/// Request body for `POST /api/worker/poll`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PollRequest {
    pub device_name: String,
    /// Upper bound on how long the server may hold the request.
    pub wait_seconds: f64,
}

/// The per-device slice of a task, delivered to exactly one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_name: String,
    pub execute_function: String,
    pub task_kind: TaskKind,
    pub params: ParamMap,
    pub max_wait_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PollResponse {
    pub assignment: Option<Assignment>,
}

/// Request body for `POST /api/worker/result`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResultRequest {
    pub device_name: String,
    pub task_name: String,
    pub result: TaskResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResultResponse {
    pub recorded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopResponse {
    pub stopped: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn envelope_ok_round_trip() {
        let env = Envelope::ok(json!({"x": 1}));
        let text = serde_json::to_string(&env).unwrap();
        let back: Envelope = serde_json::from_str(&text).unwrap();
        let data: Value = back.into_data().unwrap();
        assert_eq!(data, json!({"x": 1}));
    }

    #[test]
    fn envelope_error_surfaces_code() {
        let env = Envelope::err(ApiErrorCode::TaskUnknown, "no such task");
        let text = serde_json::to_string(&env).unwrap();
        assert!(text.contains("\"TASK_UNKNOWN\""));
        let back: Envelope = serde_json::from_str(&text).unwrap();
        let err = back.into_data::<Value>().unwrap_err();
        assert_eq!(err.api_code(), Some(ApiErrorCode::TaskUnknown));
    }

    #[test]
    fn register_request_defaults() {
        let req: RegisterRequest = serde_json::from_str(r#"{"name": "client1"}"#).unwrap();
        assert_eq!(req.name, "client1");
        assert_eq!(req.port, 0);
        assert_eq!(req.poll_interval_seconds, 5.0);
        assert!(req.hardware_config.is_none());
    }
}
